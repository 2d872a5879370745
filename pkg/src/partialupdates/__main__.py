import sys

import partialupdates
from partialupdates.errors import CheckpointError, ConfigurationError, ContractError, DivergenceError, NumericalOverflowError


def main():
    """Run the command line; exit with 2 on usage and config errors and 1 on runtime failures."""

    try:
        partialupdates.ui.CLI()
    except (ConfigurationError, FileNotFoundError) as e:
        print("Error: %s" % e, file=sys.stderr)
        sys.exit(2)
    except (DivergenceError, NumericalOverflowError, CheckpointError, ContractError, OSError) as e:
        print("Error: %s" % e, file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
