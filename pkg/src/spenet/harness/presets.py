"""The desk-scale experiment configuration shared by scripts, CLI and tests."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from ..net import NetworkConfig
from ..spe import VARIANTS
from .data import DEFAULT_CLASSES, Dataset, generate_synthetic_dataset
from .matrix import REGIMES, fingerprint
from .train import TrainConfig

DESK_EPOCHS = 60
DESK_MASKOUT = 20
DESK_PER_CLASS = 60


@dataclass
class MatrixSetup:
    net: NetworkConfig = field(default_factory=lambda: NetworkConfig(maskout_epochs=DESK_MASKOUT))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=DESK_EPOCHS))
    classes: tuple[str, ...] = DEFAULT_CLASSES
    per_class: int = DESK_PER_CLASS
    points: int = 512
    data_seed: int = 0
    variants: tuple[str, ...] = VARIANTS
    regimes: tuple[str, ...] = tuple(REGIMES)
    seeds: tuple[int, ...] = (0, 1, 2)

    def dataset(self) -> Dataset:
        return generate_synthetic_dataset(self.classes, self.per_class, self.points,
                                          self.data_seed)

    def data_spec(self) -> dict:
        return {"classes": ",".join(self.classes), "per_class": self.per_class,
                "points": self.points, "seed": self.data_seed}

    def fingerprint(self) -> str:
        return fingerprint(self.net, self.train, self.data_spec(), self.variants,
                           self.regimes, self.seeds)


def desk_matrix_setup(variants=VARIANTS, regimes=tuple(REGIMES), seeds=(0, 1, 2),
                      epochs: Optional[int] = None, per_class: Optional[int] = None,
                      classes=DEFAULT_CLASSES) -> MatrixSetup:
    """Desk defaults; mask-out stays at one third of the epoch budget."""
    s = MatrixSetup(variants=tuple(variants), regimes=tuple(regimes), seeds=tuple(seeds),
                    classes=tuple(classes))
    if epochs is not None:
        s.train = replace(s.train, epochs=epochs)
        s.net = replace(s.net, maskout_epochs=epochs // 3)
    if per_class is not None:
        s.per_class = per_class
    s.net = replace(s.net, num_classes=len(s.classes), num_points=s.points)
    return s
