"""Serve a saved toy classifier over the external-oracle protocol on stdin/stdout.

    python3 -m pwavep.oracle_server model.npz [--alpha 0.002]
"""
import argparse
import sys

from .oracle import ToyClassifier, serve


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("model")
    p.add_argument("--alpha", type=float, default=0.002)
    ns = p.parse_args(argv)
    serve(ToyClassifier.load(ns.model), ns.alpha, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
