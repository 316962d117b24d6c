"""Discrete-event simulation of the two partitions, the workload and the metrics."""
