# handlers/__init__.py
from . import evaluate, fit, phantom, sweep

COMMANDS = (phantom, fit, evaluate, sweep)


def register_all(subparsers):
    for command in COMMANDS:
        command.register(subparsers)
