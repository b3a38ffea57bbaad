"""Configuration, orchestration and command-line entry points."""
