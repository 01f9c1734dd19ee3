"""Sequential randomized trials: designs, seeded assignment, simulation, analysis."""
__version__ = "0.1.0"
