"""Workloads, scenario runs, metrics, demonstrations and reports."""
