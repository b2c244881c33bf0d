import os
import sys


def _apply_threads(argv):
    # BLAS reads these only at import time, so set them before numpy loads.
    for i, arg in enumerate(argv):
        value = None
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        if value is not None:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = value


def run():
    _apply_threads(sys.argv[1:])
    from pwavep.harness.cli import main

    sys.exit(main())


if __name__ == "__main__":
    run()
