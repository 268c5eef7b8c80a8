"""Across-task neural architecture search at desk scale.

Meta-trains a weight-sharing supernet over few-shot tasks while evolving a
population of architecture genomes, then adapts the population to a new task
by population-halving evolution.
"""

__version__ = "0.1.0"
