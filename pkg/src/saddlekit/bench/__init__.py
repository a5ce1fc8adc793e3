"""Experiment drivers, statistics, reporting and the command-line entry point."""
