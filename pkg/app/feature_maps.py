########################
# Feature Maps         #
########################

from abc import ABC, abstractmethod
import re
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import NuisanceError

_ID_PATTERN = re.compile(r'^\s*([a-z_]+)\s*(?:\[\s*([0-9,\s]*)\s*\])?\s*$')


class FeatureMap(ABC):
    """
    Deterministic expansion of covariates into regression features.

    An optional ``columns`` selection (0-based) restricts which covariates
    enter the map; the intercept is never part of the map because the ridge
    solver fits it unpenalized.
    """

    name: str = ''

    def __init__(self, columns: Optional[Sequence[int]] = None):
        self.columns: Optional[Tuple[int, ...]] = (
            tuple(int(c) for c in columns) if columns is not None else None
        )

    def select(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if self.columns is None:
            return x
        if self.columns and max(self.columns) >= x.shape[1]:
            raise NuisanceError(
                f"Feature map {self.identifier} selects column {max(self.columns) + 1} "
                f"but covariates have dimension {x.shape[1]}"
            )
        return x[:, list(self.columns)]

    @abstractmethod
    def expand(self, x: np.ndarray) -> np.ndarray:
        """
        Map selected covariates (n, p') to features (n, q).
        """
        pass  # pragma: no cover

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.expand(self.select(x))

    @property
    def identifier(self) -> str:
        """Stable id recorded in fit ledgers, e.g. ``raw`` or ``raw[1]`` (1-based columns)."""
        if self.columns is None:
            return self.name
        return f"{self.name}[{','.join(str(c + 1) for c in self.columns)}]"

    def __str__(self) -> str:
        return self.identifier


class ConstantFeatures(FeatureMap):
    """Intercept-only model: no features at all."""

    name = 'constant'

    def expand(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((x.shape[0], 0))


class RawFeatures(FeatureMap):
    """Covariates as-is."""

    name = 'raw'

    def expand(self, x: np.ndarray) -> np.ndarray:
        return x


class RichFeatures(FeatureMap):
    """
    Covariates, their elementwise squares, and sin of the first covariate.
    """

    name = 'rich'

    def expand(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] == 0:
            return x
        return np.hstack([x, x ** 2, np.sin(x[:, :1])])


class QuadraticFeatures(FeatureMap):
    """Full degree-2 expansion: covariates, squares and all pairwise products."""

    name = 'quadratic'

    def expand(self, x: np.ndarray) -> np.ndarray:
        rows, cols = np.triu_indices(x.shape[1], k=1)
        return np.hstack([x, x ** 2, x[:, rows] * x[:, cols]])


class FeatureMapFactory:
    """
    Registry of feature maps, addressable by identifier strings such as
    ``raw``, ``rich`` or ``raw[1,2]``.
    """

    _maps: Dict[str, type] = {
        'constant': ConstantFeatures,
        'raw': RawFeatures,
        'rich': RichFeatures,
        'quadratic': QuadraticFeatures,
    }

    @classmethod
    def register_feature_map(cls, name: str, map_class: type) -> None:
        """
        Register a new feature map type.

        Raises:
            TypeError: If map_class does not inherit from FeatureMap.
        """
        if not issubclass(map_class, FeatureMap):
            raise TypeError("Feature map class must inherit from FeatureMap")
        cls._maps[name.lower()] = map_class

    @classmethod
    def create_feature_map(cls, identifier: str) -> FeatureMap:
        """
        Create a feature map from its identifier.

        Args:
            identifier (str): Map name with an optional 1-based column list.

        Returns:
            FeatureMap: The configured map.

        Raises:
            NuisanceError: If the identifier is malformed or unknown.
        """
        match = _ID_PATTERN.match(identifier.lower())
        if not match:
            raise NuisanceError(f"Malformed feature map identifier: {identifier!r}")
        name, columns = match.groups()
        map_class = cls._maps.get(name)
        if not map_class:
            raise NuisanceError(f"Unknown feature map: {name}")
        selected = None
        if columns is not None:
            parsed = [int(c) for c in columns.replace(' ', '').split(',') if c]
            if any(c < 1 for c in parsed):
                raise NuisanceError(f"Feature map columns are 1-based: {identifier!r}")
            selected = [c - 1 for c in parsed]
        return map_class(selected)
