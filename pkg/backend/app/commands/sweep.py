"""
sweep: INK AUROC across test temperatures, optionally with speckle-based selection
"""
import logging
from pathlib import Path
from typing import Callable, Dict

import numpy as np

from app.commands import artifacts
from app.schemas.encoder import PrototypeBank
from app.schemas.run import RunConfig
from app.services import metrics_service, report_service
from app.utils.seeding import VALIDATION, sub_seed

logger = logging.getLogger(__name__)


def sweep_model(config: RunConfig) -> tuple[PrototypeBank, Callable[[np.ndarray], np.ndarray]]:
    """
    Prototypes and input embedding for the sweep.

    "truth" uses the generating means at tau = 1/kappa and projects inputs back
    through the lift, so the sweep can be checked against the exact likelihood.
    """
    if config.sweep_prototypes == "truth":
        truth = artifacts.load_truth(config)
        bank = PrototypeBank(mus=truth.mixture.means, tau=1.0 / truth.mixture.kappa)
        return bank, truth.lift.project
    model, bank = artifacts.load_encoder(config)
    return bank, model.embed


def cmd_sweep(config: RunConfig) -> Dict[str, Path]:
    train_set, test_set = artifacts.load_id_sets(config)
    ood_sets = artifacts.load_ood_sets(config)
    bank, embed = sweep_model(config)

    grid = metrics_service.default_tau_grid(bank.tau)
    rows = metrics_service.temperature_sweep(
        bank,
        embed(test_set.points),
        {name: embed(ood.points) for name, ood in ood_sets.items()},
        grid,
    )
    best = metrics_service.best_tau(rows)
    print(f"✅ Sweep over {len(rows)} temperatures, best mean tau={best:.5g}")
    for name in ood_sets:
        print(f"  best tau on {name}: {metrics_service.best_tau(metrics_service.dataset_rows(rows, name)):.5g}")

    chosen = None
    if config.validate_tau:
        chosen = metrics_service.select_tau_by_corruption(
            bank,
            embed,
            train_set,
            sigma=config.speckle_sigma,
            tau_grid=grid,
            seed=sub_seed(config.seed, VALIDATION),
        )
        print(f"  chosen tau by speckle validation: {chosen:.5g}")

    written = {"sweep": report_service.write_sweep(rows, config.report_dir, chosen)}
    artifacts.print_manifest("Sweep written", written)
    return written
