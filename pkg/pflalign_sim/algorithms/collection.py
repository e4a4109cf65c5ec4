"""Collection classes for managing multiple local algorithms."""

from ..errors import AlgorithmError
from .base import BaseLocalAlgorithm, LocalResult


class AlgorithmCollection:
    """A collection of local update rules, addressed by algorithm name."""

    def __init__(self, *algorithms: BaseLocalAlgorithm):
        self.algorithms = algorithms
        self.algorithm_map = {
            algorithm.to_params()["name"]: algorithm for algorithm in algorithms
        }

    def get(self, name: str) -> BaseLocalAlgorithm:
        algorithm = self.algorithm_map.get(str(name))
        if not algorithm:
            raise AlgorithmError(f"Algorithm {name} is invalid")
        return algorithm

    def run(self, *, name: str, **kwargs) -> LocalResult:
        return self.get(name)(**kwargs)
