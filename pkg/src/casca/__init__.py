"""CASCA: carbon-aware SLO observation and service control platform.

The package wires a telemetry pipeline (bus -> hooks -> time-series store),
a carbon-intensity service (EMMA), an SLO/control API gateway with privacy
aliasing, a simulated transcoding workload, and three decision systems
(random, greedy, reinforcement-learning) that reconfigure the workload
through the HTTP APIs only.
"""

__version__ = "0.1.0"
