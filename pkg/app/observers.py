########################
# Run Observers         #
########################

from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging
from typing import Any, Optional


@dataclass(frozen=True)
class CellResult:
    """Aggregate of one (design, n, method[, regime]) cell of a Monte Carlo table."""

    design: str
    n: int
    n_eff: int
    method: str
    coverage: float
    mcse: float
    avg_length: float
    bias: float
    reject_rate: float
    replications: int
    mean_v_hat: float
    regime: Optional[float] = None


class CellObserver(ABC):
    """
    Abstract base class for Monte Carlo run observers.

    Observers are notified once per aggregated cell, in table order.
    """

    @abstractmethod
    def update(self, cell: CellResult) -> None:
        """
        Handle a newly aggregated cell.

        Args:
            cell (CellResult): The aggregated cell.
        """
        pass  # pragma: no cover


class LoggingObserver(CellObserver):
    """Logs every aggregated cell."""

    def update(self, cell: CellResult) -> None:
        """
        Raises:
            AttributeError: If cell is None.
        """
        if cell is None:
            raise AttributeError("Cell cannot be None")
        regime = f" regime={cell.regime}" if cell.regime is not None else ""
        logging.info(
            f"Cell {cell.design} n={cell.n} {cell.method}{regime}: coverage={cell.coverage:.3f} "
            f"(MCSE {cell.mcse:.3f}) length={cell.avg_length:.4f} bias={cell.bias:+.4f} "
            f"R={cell.replications}"
        )


class AutoSaveObserver(CellObserver):
    """
    Writes the partial table after each cell when auto-save is enabled.
    """

    def __init__(self, lab: Any):
        """
        Args:
            lab (Any): Must have 'config' and 'save_partial_table' attributes.

        Raises:
            TypeError: If the lab does not have the required attributes.
        """
        if not hasattr(lab, 'config') or not hasattr(lab, 'save_partial_table'):
            raise TypeError("Lab must have 'config' and 'save_partial_table' attributes")
        self.lab = lab

    def update(self, cell: CellResult) -> None:
        if cell is None:
            raise AttributeError("Cell cannot be None")
        if self.lab.config.auto_save:
            self.lab.save_partial_table(cell)
            logging.info("Partial table auto-saved")
