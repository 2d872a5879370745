"""Messages for the partialupdates package."""

# Help long messages
description = (
    "Simulate low-communication data-parallel training with partial parameter updates \n"
    "and evaluate the analytic FLOPs, memory and communication models."
)

train_long_description = (
    "Train a small transformer on K simulated nodes from a JSON experiment config. \n"
    "Writes metrics.csv, rounds.csv, summary.json, resolved_config.json, checkpoint.bin \n"
    "and log.txt to the output directory."
)

cost_long_description = (
    "Evaluate the analytic cost models for the cost section of a config. \n"
    "Writes cost_report.json, and a sweep CSV when --sweep is given."
)

compare_long_description = (
    "Train (or reuse finished runs of) several configs that share one model section and \n"
    "write a side-by-side summary to comparison.csv."
)

inspect_long_description = "Print the header and shape table of a checkpoint file."

config_long_description = (
    "Path to a JSON experiment config with sections model, run, corpus, cost and the \n"
    "fields output, seed, name and schema_version. Use 'bundled:<name>' for a config \n"
    "shipped with the package. Available bundled configs: smoke, reference_cost."
)

output_long_description = (
    "Path to output directory where to save results. Overrides the config file. \n"
    "Relative paths are resolved against $PARTIALUPDATES_OUTPUT_ROOT when it is set."
)

seed_long_description = "Seed of the run and the corpus. Overrides the config file."

threads_long_description = (
    "Worker threads for the node loops. Results do not depend on this value. \n"
    "Default: all available cores."
)

set_long_description = (
    "Override any config field, in the format section.field=value. May be repeated. \n"
    "Example: --set run.num_slices=2 --set run.sync_grouping=by-layers \n"
    "Nested cost model fields use three parts: --set cost.model.num_layers=12"
)

resume_long_description = "Path to a checkpoint written by a previous train run; training continues from it."

sweep_long_description = (
    "Sweep to write next to the cost report. Format: kind or kind=v1,v2,... \n"
    "bandwidth: bytes/s per link (Default grid: cost.sweep_bandwidths). \n"
    "rho: slice counts N for MLP slicing (Default grid: cost.sweep_slices). \n"
    "rho-heads: slice counts N for MLP and head slicing. \n"
    "reference: memory and trainable counts of the reference variants."
)

checkpoint_long_description = "Path to a checkpoint file."

# Banners
setup_banner = """
-----------------------------------
partialupdates
-----------------------------------
"""
