import json
import os
import shutil

import pandas as pd
import pytest

import partialupdates.utils as utils


class InstanceClass(object):
    """
    Dummy class to test the partialupdates.utils.log decorator.
    The decorator needs an 'instance' input object with a .log_path attribute.
    """

    def __init__(self, log_path):
        self.log_path = log_path


def test_log_decorator(tmp_path):
    @utils.log
    def func_to_log(instance, to_print):
        print(to_print)

    instance_dummy = InstanceClass(str(tmp_path / "test_log_mondongo"))
    to_print = "Mondongo for the win"
    func_to_log(instance_dummy, to_print)

    assert os.path.exists(instance_dummy.log_path)
    with open(instance_dummy.log_path, "r") as f:
        assert f.readline() == to_print + "\n"


def test_log_decorator_logs_failed_runs(tmp_path):
    @utils.log
    def func_to_fail(instance):
        print("Round 1/2")
        raise RuntimeError("boom")

    instance_dummy = InstanceClass(str(tmp_path / "log.txt"))
    with pytest.raises(RuntimeError):
        func_to_fail(instance_dummy)
    with open(instance_dummy.log_path, "r") as f:
        assert f.read() == "Round 1/2\n"


@pytest.mark.parametrize(
    "input, expected",
    [("true", True), ("false", False), ("None", None), ("null", None), ("42", 42), ("420.69", 420.69), ("mondongo", "mondongo")],
)
def test_convert_value(input, expected):
    assert utils.convert(input) == expected


def test_convert_keeps_int_type():
    assert isinstance(utils.convert("8"), int)
    assert isinstance(utils.convert("3e-3"), float)


def test_create_directory():
    path = os.path.join(os.getcwd(), "temp_folder")
    utils.create_directory(path)
    assert os.path.exists(path)
    # Second call is a no-op
    utils.create_directory(path)
    shutil.rmtree(path)


def test_write_json_atomic(tmp_path):
    path = tmp_path / "nested" / "summary.json"
    utils.write_json_atomic(str(path), {"b": 1, "a": [1.5, None]})
    text = path.read_text(encoding="utf-8")
    assert text == '{\n  "a": [\n    1.5,\n    null\n  ],\n  "b": 1\n}\n'
    assert json.loads(text) == {"a": [1.5, None], "b": 1}
    # No temporary files are left behind
    assert os.listdir(path.parent) == ["summary.json"]


def test_write_csv_atomic(tmp_path):
    path = tmp_path / "metrics.csv"
    utils.write_csv_atomic(str(path), pd.DataFrame({"step": [1, 2], "loss": [4.0, 3.5]}))
    assert path.read_bytes() == b"step,loss\n1,4.0\n2,3.5\n"


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    path = tmp_path / "checkpoint.bin"
    utils.write_bytes_atomic(str(path), b"old")

    def failing_write(f):
        f.write(b"partial")
        raise OSError("disk full")

    with pytest.raises(OSError):
        utils._atomic_write(str(path), failing_write)
    assert path.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["checkpoint.bin"]
