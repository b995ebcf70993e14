"""
generate: ID train/test sets, OOD sets and the truth sidecar
"""
import logging
from pathlib import Path
from typing import Dict

from app.commands import artifacts
from app.schemas.dataset import TaskTruth
from app.schemas.run import RunConfig
from app.services.synth_service import make_id_task, make_ood_set
from app.utils import codec
from app.utils.seeding import GENERATION, sub_seed

logger = logging.getLogger(__name__)


def cmd_generate(config: RunConfig) -> Dict[str, Path]:
    seed = sub_seed(config.seed, GENERATION)
    task = make_id_task(
        d_in=config.d_in,
        d=config.dim,
        num_classes=config.num_classes,
        kappa=config.kappa,
        priors=config.priors,
        n=config.n,
        seed=seed,
        sigma_lift=config.sigma_lift,
    )

    written = {
        artifacts.ID_TRAIN: codec.save_set(task.train, artifacts.set_path(config, artifacts.ID_TRAIN)),
        artifacts.ID_TEST: codec.save_set(task.test, artifacts.set_path(config, artifacts.ID_TEST)),
    }
    for kind in config.ood_kinds:
        ood = make_ood_set(
            kind,
            task.truth,
            config.n_ood,
            sub_seed(seed, f"ood/{kind.value}"),
            task.lift,
            config.rotation_angle,
        )
        name = artifacts.ood_name(kind)
        written[name] = codec.save_set(ood, artifacts.set_path(config, name))

    truth = TaskTruth(mixture=task.truth, lift=task.lift, ood_kinds=config.ood_kinds)
    truth_path = config.data_dir / artifacts.TRUTH_FILE
    truth_path.write_text(truth.model_dump_json(indent=2), encoding="utf-8")
    written["truth"] = truth_path

    artifacts.print_manifest(f"Generated {len(written)} files", written)
    return written
