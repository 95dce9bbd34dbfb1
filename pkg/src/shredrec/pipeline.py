"""Reconstruction of one instance: embed boundaries, score pairs, order shreds."""

from __future__ import annotations

from dataclasses import dataclass

from .compat import CompatConfig, CostMatrix, build_cost_matrix
from .docproc import ReconstructionInstance, boundary_crop
from .metrics import RunReport, accuracy, stage_timer
from .projector import DOWNSAMPLE, EmbeddingTensor, ProjectorPair, embed_boundary
from .solver import EXACT_LIMIT, Solution, solve


@dataclass(frozen=True)
class SolverConfig:
    exact_limit: int = EXACT_LIMIT
    seed: int = 0
    restarts: int = 8


def crop_height(instance: ReconstructionInstance, s_y: int) -> int:
    """Largest multiple of 4 not above the shortest shred."""
    h = min(sh.height for sh in instance.shreds)
    h -= h % DOWNSAMPLE
    if h < s_y:
        raise ValueError(f"shreds of height {h} are shorter than the sample height {s_y}")
    return h


def embed_instance(pair: ProjectorPair, instance: ReconstructionInstance,
                   h: int | None = None) -> tuple[list[EmbeddingTensor], list[EmbeddingTensor]]:
    """Exactly two network passes per shred: its right and its left boundary."""
    h = crop_height(instance, pair.s_y) if h is None else h
    rights, lefts = [], []
    for k, sh in enumerate(instance.shreds):
        ref = f"{sh.page_id}:{sh.gt_index}"
        rights.append(embed_boundary(pair, "right", boundary_crop(sh, "right", pair.s_x, h), ref))
        lefts.append(embed_boundary(pair, "left", boundary_crop(sh, "left", pair.s_x, h), ref))
    return rights, lefts


def reconstruct(pair: ProjectorPair, instance: ReconstructionInstance,
                compat_cfg: CompatConfig = CompatConfig(), solver_cfg: SolverConfig = SolverConfig(),
                config_echo: dict | None = None) -> tuple[Solution, CostMatrix, RunReport]:
    """Run the three timed stages and score the result against ground truth."""
    report = RunReport(n=instance.n, multi_page=instance.multi_page, config=dict(config_echo or {}))
    timer = stage_timer(report)
    with timer.stage("pro"):
        rights, lefts = embed_instance(pair, instance)
    with timer.stage("pw"):
        matrix = build_cost_matrix(rights, lefts, compat_cfg)
    with timer.stage("opt"):
        solution = solve(matrix, solver_cfg.exact_limit, solver_cfg.seed, solver_cfg.restarts)
    report.accuracy = accuracy(solution, instance)
    report.relaxed_accuracy = accuracy(solution, instance, relaxed=True)
    report.order = [int(i) for i in solution.order]
    report.objective = solution.objective
    report.solver = solution.solver
    return solution, matrix, report
