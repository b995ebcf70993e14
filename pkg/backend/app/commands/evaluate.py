"""
evaluate: score ID test and every OOD set with each configured score and write the report
"""
import logging
from pathlib import Path
from typing import Dict

import numpy as np

from app.commands import artifacts
from app.schemas.dataset import LabeledEmbeddingSet, RawInputSet
from app.schemas.encoder import PrototypeBank
from app.schemas.report import DetectionReport, OodResult
from app.schemas.run import RunConfig
from app.schemas.scores import ScoreKind
from app.services import detector_service, metrics_service, report_service
from app.services.encoder_service import CeClassifier
from app.services.score_service import ScoreFunction, get_score_service

logger = logging.getLogger(__name__)

TWIN_SCORES = (ScoreKind.ENERGY, ScoreKind.MSP_CE)


def class_frequencies(labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def build_scores(
    config: RunConfig,
    bank: PrototypeBank,
    train_embeddings: LabeledEmbeddingSet,
    ce_model: CeClassifier | None,
) -> Dict[ScoreKind, ScoreFunction]:
    """
    Instantiate every configured score; CE-twin scores are skipped without a twin.

    INK is always included, first when the config leaves it out.
    """
    kinds = config.scores if ScoreKind.INK in config.scores else [ScoreKind.INK, *config.scores]
    return get_score_service(config.knn_k, config.energy_tau).build_all(
        kinds,
        bank,
        config.tau_test,
        pool=train_embeddings,
        priors=class_frequencies(train_embeddings.labels, bank.num_classes),
        ce_model=ce_model,
    )


def _inputs_for(score: ScoreFunction, raw: RawInputSet, embedded: np.ndarray) -> np.ndarray:
    return raw.points if score.consumes == "input" else embedded


def cmd_eval(config: RunConfig) -> Dict[str, Path]:
    train_set, test_set = artifacts.load_id_sets(config)
    ood_sets = artifacts.load_ood_sets(config)
    model, bank = artifacts.load_encoder(config)
    needs_twin = any(kind in TWIN_SCORES for kind in config.scores)
    ce_model = artifacts.load_ce_twin(config) if needs_twin and config.train_ce_twin else None

    train_embeddings = LabeledEmbeddingSet(name="id_train", points=model.embed(train_set.points), labels=train_set.labels)
    test_embedded = model.embed(test_set.points)
    ood_embedded = {name: model.embed(ood.points) for name, ood in ood_sets.items()}
    accuracy = metrics_service.id_accuracy(bank, test_embedded, test_set.labels)
    logger.info(f"ID accuracy {accuracy:.4f}")

    results, detectors, histograms = [], [], []
    for kind, score in build_scores(config, bank, train_embeddings, ce_model).items():
        id_scores = score.score_batch(_inputs_for(score, test_set, test_embedded))
        detectors.append(detector_service.calibrate(id_scores, config.target_tpr, score_kind=kind.value))
        for name, ood in ood_sets.items():
            ood_scores = score.score_batch(_inputs_for(score, ood, ood_embedded[name]))
            results.append(OodResult(
                score=kind.value,
                dataset=name,
                auroc=metrics_service.auroc(id_scores, ood_scores),
                fpr_at_95=metrics_service.fpr_at_tpr(id_scores, ood_scores, config.target_tpr),
            ))
            histograms.append(metrics_service.score_histogram(
                kind.value, name, id_scores, ood_scores, bins=config.histogram_bins
            ))
            logger.info(f"{kind.value} vs {name}: AUROC={results[-1].auroc:.4f} FPR@95={results[-1].fpr_at_95:.4f}")

    report = DetectionReport(
        seed=config.seed,
        tau_test=config.tau_test,
        target_tpr=config.target_tpr,
        id_accuracy=accuracy,
        results=results,
        detectors=detectors,
        histograms=histograms,
    )
    written = report_service.write_report(report, config.report_dir)
    artifacts.print_manifest(f"Evaluated {len(detectors)} scores on {len(ood_sets)} OOD sets", written)
    return written
