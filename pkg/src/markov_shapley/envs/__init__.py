"""Fixture games and learning environments."""
from .fixtures import FIXTURES, Fixture, all_fixtures, fixture, random_convex_game

__all__ = ["FIXTURES", "Fixture", "all_fixtures", "fixture", "random_convex_game"]
