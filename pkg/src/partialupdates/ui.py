"""Implement the user interface.

Used in the partialupdates project to run training experiments, baselines
and cost-model reports from declarative JSON configs.

Classes:
--------
ExperimentConfig - all sections of an experiment, validated as a whole.
Interface - sets up the output directory and executes runs.
CLI - reads and parses user commands via command line.
"""

import argparse
import copy
import dataclasses
import importlib.resources as pkg_resources
import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime

import pandas as pd

import partialupdates.messages as messages
from partialupdates import configs
from partialupdates.checkpoint import inspect_checkpoint
from partialupdates.costmodel import CostConfig, bandwidth_sweep, cost_report, reference_table, rho_sweep
from partialupdates.datasets import SyntheticCorpusSpec, generate_corpus
from partialupdates.errors import ConfigurationError
from partialupdates.model import ModelConfig
from partialupdates.orchestrator import RunConfig, Trainer
from partialupdates.slicing import SlicePlan, SyncSchedule
from partialupdates.utils import convert, create_directory, log, write_csv_atomic, write_json_atomic

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "PARTIALUPDATES_OUTPUT_ROOT"
SECTIONS = {"model": ModelConfig, "run": RunConfig, "corpus": SyntheticCorpusSpec, "cost": CostConfig}
TOP_LEVEL = ("schema_version", "name", "output", "seed")
SWEEPS = ("bandwidth", "rho", "rho-heads", "reference")
COMPARE_COLUMNS = [
    "name", "algorithm", "num_slices", "strategy", "sync_grouping", "backward_mode",
    "final_train_loss", "final_eval_loss", "final_eval_perplexity", "tokens", "sim_wallclock_s",
]


def _coerce(section, cls, name, value):
    """Check a config value against the dataclass field type."""

    types = {f.name: f.type for f in dataclasses.fields(cls)}
    if name not in types:
        raise ConfigurationError("Unknown config field %s.%s." % (section, name))
    expected = types[name]
    if value is None or expected not in (int, float, bool, str):
        return value
    if expected is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, expected) and not (expected is int and isinstance(value, bool)):
        return value
    raise ConfigurationError("Config field %s.%s must be %s, got %r." % (section, name, expected.__name__, value))


def _set_path(data, path, value):
    keys = path.split(".")
    target = data
    for key in keys[:-1]:
        target = target.setdefault(key, {})
        if not isinstance(target, dict):
            raise ConfigurationError("Cannot set %s: %s is not a section." % (path, key))
    target[keys[-1]] = value


def parse_override(item):
    """Split 'section.field=value' into its path and converted value."""

    if item.count("=") != 1:
        raise ConfigurationError("Overrides must be in the format section.field=value, got %r." % item)
    path, value = item.split("=")
    if not path:
        raise ConfigurationError("Overrides must be in the format section.field=value, got %r." % item)
    return path, convert(value)


@dataclass
class ExperimentConfig:

    """All configuration of one experiment.

    Parameters
    -----------
    model: ModelConfig of the trained transformer
    run: RunConfig of the training algorithm, slicing and schedule
    corpus: SyntheticCorpusSpec; vocab_size and seq_len default to the model's V and S + 1
    cost: CostConfig of the analytic report
    output: output directory
    seed: default seed of the run and corpus sections
    name: label used in comparisons
    schema_version: version of the config format
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    cost: CostConfig = field(default_factory=CostConfig)
    output: str = "partialupdates_output"
    seed: int = 0
    name: str = "experiment"
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data, overrides=()):
        """Build a config from parsed JSON and a list of 'path=value' overrides."""

        data = copy.deepcopy(data)
        for item in overrides:
            _set_path(data, *parse_override(item))

        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError("Rule 'schema_version == %d' violated: schema_version=%s." % (SCHEMA_VERSION, version))
        for key in data:
            if key not in SECTIONS and key not in TOP_LEVEL:
                warn_message = "Ignoring unknown config key %s." % key
                print(warn_message)
                warnings.warn(warn_message, category=UserWarning)

        sections = {}
        for section, section_cls in SECTIONS.items():
            values = data.get(section) or {}
            if not isinstance(values, dict):
                raise ConfigurationError("Config section %s must be an object." % section)
            sections[section] = {name: _coerce(section, section_cls, name, value) for name, value in values.items()}

        seed = _coerce("experiment", cls, "seed", data.get("seed", 0))
        model = ModelConfig(**sections["model"])
        sections["corpus"].setdefault("vocab_size", model.vocab_size)
        sections["corpus"].setdefault("seq_len", model.seq_len + 1)
        sections["corpus"].setdefault("seed", seed)
        sections["run"].setdefault("seed", seed)
        cost_model = sections["cost"].get("model")
        if isinstance(cost_model, dict):
            sections["cost"]["model"] = ModelConfig(**{k: _coerce("cost.model", ModelConfig, k, v) for k, v in cost_model.items()})

        return cls(
            model=model,
            run=RunConfig(**sections["run"]),
            corpus=SyntheticCorpusSpec(**sections["corpus"]),
            cost=CostConfig(**sections["cost"]),
            output=str(data.get("output", "partialupdates_output")),
            seed=seed,
            name=str(data.get("name", "experiment")),
            schema_version=version,
        )

    def validate(self):
        """Validate every section and the rules that span sections."""

        self.model.validate()
        self.run.validate()
        self.corpus.validate()
        self.cost.validate()
        if self.corpus.vocab_size != self.model.vocab_size:
            raise ConfigurationError(
                "Rule 'corpus V == model V' violated: corpus V=%d, model V=%d." % (self.corpus.vocab_size, self.model.vocab_size)
            )
        if self.corpus.seq_len - 1 > self.model.seq_len:
            raise ConfigurationError(
                "Rule 'corpus seq_len - 1 <= model S' violated: corpus seq_len=%d, model S=%d." % (self.corpus.seq_len, self.model.seq_len)
            )
        run = self.run
        SlicePlan(self.model, run.num_nodes, run.num_slices, run.strategy)
        SyncSchedule(self.model, run.sync_grouping, run.period, run.layer_group_size, run.num_slices, run.stagger)
        per_node = self.corpus.num_sequences // run.num_nodes
        if run.node_batch_size > per_node:
            raise ConfigurationError(
                "Rule 'batch size fits in a shard' violated: batch size=%d, shard size=%d." % (run.node_batch_size, per_node)
            )
        return self

    def to_dict(self):
        return asdict(self)


def read_config_file(path):
    """Parsed JSON of a config file, or of a bundled config given as 'bundled:<name>'."""

    if path.startswith("bundled:"):
        resource = pkg_resources.files(configs).joinpath(path[len("bundled:"):] + ".json")
        if not resource.is_file():
            raise FileNotFoundError("File %s not found." % path)
        text = resource.read_text(encoding="utf-8")
    else:
        if not os.path.exists(path):
            raise FileNotFoundError("File %s not found." % path)
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError("Config %s is not valid JSON: %s." % (path, e)) from e


def load_config(path, overrides=()):
    return ExperimentConfig.from_dict(read_config_file(path), overrides).validate()


def resolve_output(output):
    """Resolve relative output paths against $PARTIALUPDATES_OUTPUT_ROOT when set."""

    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(output):
        return os.path.join(root, output)
    return output


def train_experiment(config, output_dir, resume=None):
    """Train one experiment and write its outputs; returns the summary dict."""

    create_directory(output_dir)
    write_json_atomic(os.path.join(output_dir, "resolved_config.json"), config.to_dict())
    store = generate_corpus(config.corpus)
    if resume is not None:
        if not os.path.exists(resume):
            raise FileNotFoundError("File %s not found." % resume)
        print("Resuming from %s" % resume)
        trainer = Trainer.load(resume, store, config.run)
    else:
        trainer = Trainer(config.model, config.run, store)

    print("Training %s: algorithm %s, K=%d, N=%d, H=%d, T=%d" % (
        config.name, config.run.algorithm, config.run.num_nodes, config.run.num_slices, config.run.period, config.run.rounds))
    metrics = trainer.run()
    metrics.write_csv(os.path.join(output_dir, "metrics.csv"), os.path.join(output_dir, "rounds.csv"))
    trainer.save(os.path.join(output_dir, "checkpoint.bin"))

    run = config.run
    summary = {
        "name": config.name,
        "algorithm": run.algorithm,
        "num_slices": run.num_slices,
        "strategy": run.strategy,
        "sync_grouping": run.sync_grouping,
        "backward_mode": run.backward_mode,
    }
    summary.update(metrics.summary())
    write_json_atomic(os.path.join(output_dir, "summary.json"), summary)
    print("Final eval loss %.4f, perplexity %.3f after %d tokens" % (
        summary["final_eval_loss"], summary["final_eval_perplexity"], summary["tokens"]))
    return summary


class Interface:

    """Sets up the output directory and executes runs.

    Parameters
    -----------
    args: arguments with which to run; args.config is a validated ExperimentConfig

    Public methods:
    ---------------
    setup(self): Creates required directories and files to store results.

    run_wrapper(self, run): Wrapper for running with log.

    run_train(self): Train the experiment.

    run_cost(self): Write the cost report and an optional sweep.

    run_compare(self): Train or reuse several experiments and compare them.

    run_checkpoint_inspect(self): Print a checkpoint header.
    """

    def __init__(self, args):
        """Initialise variables."""

        # Arguments with which to run
        self.args = args
        self.config = args.config

        # Set up directory for storage of results
        self.setup()

    def setup(self):
        """Create required directories and files to store results."""

        self.dir_path = resolve_output(self.config.output)
        if os.path.exists(self.dir_path):
            warnings.warn(
                "Directory %s already exists files may be overwritten." % self.dir_path,
                category=UserWarning,
            )
        create_directory(self.dir_path)

        # Create .txt log file and log time
        self.log_path = os.path.join(self.dir_path, "log.txt")
        with open(self.log_path, "a") as f:
            current_time = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
            f.write(current_time + "\n")

    @log
    def run_wrapper(self, run):
        """Wrapper for running with log."""
        return run()

    def run_train(self):
        """Train the experiment."""

        print(messages.setup_banner)
        return train_experiment(self.config, self.dir_path, getattr(self.args, "resume", None))

    def _sweep(self, spec):
        kind, _, values = spec.partition("=")
        if kind not in SWEEPS:
            raise ConfigurationError("Choose a valid sweep: %s" % list(SWEEPS))
        grid = [convert(v) for v in values.split(",")] if values else None
        cost = self.config.cost
        if kind == "bandwidth":
            return kind, bandwidth_sweep(cost, grid)
        if kind == "reference":
            return kind, reference_table(cost)
        return kind, rho_sweep(cost, grid, heads=kind == "rho-heads")

    def run_cost(self):
        """Write the cost report and an optional sweep."""

        print(messages.setup_banner)
        report = cost_report(self.config.cost)
        write_json_atomic(os.path.join(self.dir_path, "resolved_config.json"), self.config.to_dict())
        write_json_atomic(os.path.join(self.dir_path, "cost_report.json"), report)

        sweep = getattr(self.args, "sweep", None)
        if sweep:
            kind, df = self._sweep(sweep)
            write_csv_atomic(os.path.join(self.dir_path, "sweep_%s.csv" % kind), df)
            print(df.to_string(index=False))
        return report

    def run_compare(self):
        """Train or reuse several experiments that share one model section."""

        experiments = self.args.compare_configs
        first = experiments[0]
        for other in experiments[1:]:
            if other.model != first.model:
                raise ConfigurationError(
                    "Rule 'compared configs share one model section' violated: %s differs from %s." % (other.name, first.name)
                )

        rows, used = [], set()
        for i, config in enumerate(experiments):
            label = config.name if config.name not in used else "%s_%d" % (config.name, i)
            used.add(label)
            run_dir = os.path.join(self.dir_path, label)
            summary_path = os.path.join(run_dir, "summary.json")
            resolved_path = os.path.join(run_dir, "resolved_config.json")
            if os.path.exists(summary_path) and os.path.exists(resolved_path):
                with open(resolved_path, "r", encoding="utf-8") as f:
                    resolved = json.load(f)
                if resolved == json.loads(json.dumps(config.to_dict())):
                    print("Reusing finished run %s" % run_dir)
                    with open(summary_path, "r", encoding="utf-8") as f:
                        summary = json.load(f)
                    summary["name"] = label
                    rows.append(summary)
                    continue
            summary = train_experiment(config, run_dir)
            summary["name"] = label
            rows.append(summary)

        df = pd.DataFrame(rows).reindex(columns=COMPARE_COLUMNS)
        write_csv_atomic(os.path.join(self.dir_path, "comparison.csv"), df)
        print(df.to_string(index=False))
        return df


def run_checkpoint_inspect(path):
    """Print the header and shape table of a checkpoint."""

    info = inspect_checkpoint(path)
    print(json.dumps(info, indent=2, sort_keys=True))
    return info


class CLI(Interface):

    """Read and parses user commands via command line.

    Public methods:
    ---------------
    configure_parser(self): Configure parser with subcommands and arguments.

    configure_args(self, args): Load configs and apply overrides.
    """

    def __init__(self, argv=None):
        """Initialise variables."""
        self.parser = argparse.ArgumentParser(
            prog="partialupdates",
            description=messages.description,
            formatter_class=argparse.RawTextHelpFormatter,
        )
        self.configure_parser()
        args = self.parser.parse_args(argv)

        if args.command == "checkpoint-inspect":
            self.args = args
            self.result = run_checkpoint_inspect(args.checkpoint)
            return

        args = self.configure_args(args)

        # Initialise parent class
        super().__init__(args)

        # Run
        case = args.command
        if case == "train":
            self.run = self.run_train
        elif case == "cost":
            self.run = self.run_cost
        elif case == "compare":
            self.run = self.run_compare
        else:
            raise ValueError("Choose a valid command: train, cost, compare, checkpoint-inspect")

        self.result = self.run_wrapper(self.run)

    def _add_common(self, parser):
        parser.add_argument("-o", "--output", metavar="DIR", help=messages.output_long_description)
        parser.add_argument("--seed", type=int, help=messages.seed_long_description)
        parser.add_argument("--threads", type=int, help=messages.threads_long_description)
        parser.add_argument("--set", dest="overrides", metavar="PATH=VALUE", action="append", default=[],
                            help=messages.set_long_description)

    def configure_parser(self):
        """Configure parser with subcommands and arguments."""

        subparsers = self.parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

        train = subparsers.add_parser("train", help=messages.train_long_description, formatter_class=argparse.RawTextHelpFormatter)
        train.add_argument("config", metavar="CONFIG", help=messages.config_long_description)
        train.add_argument("--resume", metavar="FILE", help=messages.resume_long_description)
        self._add_common(train)

        cost = subparsers.add_parser("cost", help=messages.cost_long_description, formatter_class=argparse.RawTextHelpFormatter)
        cost.add_argument("config", metavar="CONFIG", help=messages.config_long_description)
        cost.add_argument("--sweep", metavar="KIND[=V1,V2,...]", help=messages.sweep_long_description)
        self._add_common(cost)

        compare = subparsers.add_parser(
            "compare", help=messages.compare_long_description, formatter_class=argparse.RawTextHelpFormatter
        )
        compare.add_argument("configs", metavar="CONFIG", nargs="+", help=messages.config_long_description)
        self._add_common(compare)

        inspect = subparsers.add_parser("checkpoint-inspect", help=messages.inspect_long_description)
        inspect.add_argument("checkpoint", metavar="FILE", help=messages.checkpoint_long_description)

    def configure_args(self, args):
        """Load configs and apply overrides.

        Parameters
        ----------
        args: arguments object from parser
        """

        overrides = list(args.overrides)
        if args.seed is not None:
            overrides += ["seed=%d" % args.seed, "run.seed=%d" % args.seed, "corpus.seed=%d" % args.seed]
        if args.threads is not None:
            overrides.append("run.threads=%d" % args.threads)

        if args.command == "compare":
            args.compare_configs = [load_config(path, overrides) for path in args.configs]
            output = args.output or os.path.join("partialupdates_output", "compare")
            args.config = ExperimentConfig(output=output, name="compare")
        else:
            args.config = load_config(args.config, overrides)
            if args.output is not None:
                args.config.output = args.output
        return args
