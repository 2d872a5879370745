"""Utility functions for the partialupdates package."""

import io
import json
import os
import sys
import tempfile


def create_directory(path):
    """Create directory only if it does not previously exist."""
    if not os.path.exists(path):
        os.makedirs(path)


def convert(value):
    """Convert string value to other types if possible."""
    if value.lower() == "true":
        converted_value = True
    elif value.lower() == "false":
        converted_value = False
    elif value.lower() in ("none", "null"):
        converted_value = None
    else:
        try:
            converted_value = int(value)
        except ValueError:
            try:
                converted_value = float(value)
            except ValueError:
                # If the value cannot be converted to a number, keep it as a string
                converted_value = value
    return converted_value


def _atomic_write(path, write):
    """Write to a temporary file in the target directory, then rename it over path."""

    directory = os.path.dirname(os.path.abspath(path))
    create_directory(directory)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as tmp_file:
            write(tmp_file)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_bytes_atomic(path, data):
    _atomic_write(path, lambda f: f.write(data))


def write_json_atomic(path, obj):
    """Write obj as UTF-8 JSON with sorted keys."""
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    write_bytes_atomic(path, text.encode("utf-8"))


def write_csv_atomic(path, df):
    """Write a pandas dataframe as comma-separated values with LF line endings."""
    text = df.to_csv(index=False, lineterminator="\n")
    write_bytes_atomic(path, text.encode("utf-8"))


def log(func):
    """Decorator function to log stdout to log.txt."""

    def wrapper(instance, *args, **kwargs):
        # Redirect the standard output to capture print statements
        original_stdout = sys.stdout
        captured_output = io.StringIO()
        sys.stdout = captured_output

        try:
            # Call the function
            result = func(instance, *args, **kwargs)
        finally:
            # Restore the original standard output
            sys.stdout = original_stdout

            # Log the captured output to the file, also when the run failed
            with open(instance.log_path, "a") as log_file:
                log_file.write(captured_output.getvalue())

            # Print the captured output to the console
            print("\n".join(captured_output.getvalue().split("\n")[:-1]))

        return result

    return wrapper
