"""Plan editing with a learned planner and an asymmetric advantage model over a simulated DBMS."""

__version__ = "0.1.0"
