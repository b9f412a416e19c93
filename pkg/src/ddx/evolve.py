"""Generational search over pipeline genomes maximizing cross-validated accuracy.

Every offspring slot draws from its own RNG substream keyed on
(seed, generation, slot), and fitness is memoized by the canonical genome
encoding, so results do not depend on how many worker threads score them.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, InfeasibleError
from .pipeline import (
    MAX_PREPROCESSORS,
    CvConfig,
    Gene,
    OperatorSpace,
    PipelineGenome,
    check_cv_feasible,
    execute_pipeline,
    score_genome,
)


@dataclass(frozen=True)
class EvolveConfig:
    generations: int = 2
    population: int = 30
    folds: int = 5
    seed: int = 0
    mutation_rate: float = 0.9
    crossover_rate: float = 0.1
    tournament_size: int = 3
    elitism: int = 1
    threads: Optional[int] = None
    space: OperatorSpace = field(default_factory=OperatorSpace)

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("population must be >= 2")
        if self.generations < 0:
            raise ConfigError("generations must be >= 0")
        for name in ("mutation_rate", "crossover_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.tournament_size < 1 or not 0 <= self.elitism < self.population:
            raise ConfigError("tournament_size >= 1 and 0 <= elitism < population required")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        CvConfig(self.folds)

    @property
    def cv(self) -> CvConfig:
        return CvConfig(self.folds, self.seed)

    def echo(self) -> dict:
        return {
            "generations": self.generations, "population": self.population, "scoring": self.cv.scoring,
            "folds": self.folds, "seed": self.seed, "mutation_rate": self.mutation_rate,
            "crossover_rate": self.crossover_rate, "tournament_size": self.tournament_size,
            "elitism": self.elitism,
        }


@dataclass
class GenerationRecord:
    generation: int
    best_genome: str
    best_score: float
    leaderboard: list  # [(encoding, score)] top entries in rank order


@dataclass
class EvolveReport:
    seed: int
    config: dict
    generations: list
    evaluations: int
    best_genome: str
    best_score: float
    wall_time_s: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        doc = {
            "seed": self.seed,
            "config": self.config,
            "evaluations": self.evaluations,
            "best_genome": self.best_genome,
            "best_score": _num(self.best_score),
            "generations": [
                {"generation": r.generation, "best_genome": r.best_genome, "best_score": _num(r.best_score),
                 "leaderboard": [{"genome": g, "score": _num(s)} for g, s in r.leaderboard]}
                for r in self.generations
            ],
        }
        if timing:
            doc["wall_time_s"] = self.wall_time_s
        return doc


def _num(x: float):
    return x if np.isfinite(x) else None


# --------------------------------------------------------------------------- variation


def _grid(space: OperatorSpace, g: PipelineGenome, i: int) -> dict:
    kind = g.steps[i].kind
    return space.classifiers[kind] if i == len(g.steps) - 1 else space.preprocessors[kind]


def _point_sites(g: PipelineGenome, space: OperatorSpace) -> list:
    return [(i, name) for i, gene in enumerate(g.steps) for name, _ in gene.params
            if len(_grid(space, g, i)[name]) > 1]


def mutation_moves(g: PipelineGenome, space: OperatorSpace) -> list:
    moves = []
    if _point_sites(g, space):
        moves.append("point")
    used = {p.kind for p in g.preprocessors}
    if len(g.preprocessors) < MAX_PREPROCESSORS and any(k not in used for k in space.preprocessors):
        moves.append("insert")
    if g.preprocessors:
        moves.append("remove")
    if len(space.classifiers) > 1:
        moves.append("replace_classifier")
    return moves


def mutate(g: PipelineGenome, rng, space: Optional[OperatorSpace] = None) -> PipelineGenome:
    """Apply one move drawn uniformly from those applicable to ``g``."""
    space = space or OperatorSpace()
    moves = mutation_moves(g, space)
    if not moves:
        return g
    move = moves[int(rng.integers(len(moves)))]
    steps = list(g.steps)
    if move == "point":
        sites = _point_sites(g, space)
        i, name = sites[int(rng.integers(len(sites)))]
        gene = steps[i]
        current = gene.param_dict[name]
        options = [v for v in _grid(space, g, i)[name] if not (type(v) is type(current) and v == current)]
        steps[i] = Gene.make(gene.kind, **{**gene.param_dict, name: options[int(rng.integers(len(options)))]})
    elif move == "insert":
        used = {p.kind for p in g.preprocessors}
        kinds = [k for k in space.preprocessors if k not in used]
        kind = kinds[int(rng.integers(len(kinds)))]
        pos = int(rng.integers(len(g.preprocessors) + 1))
        steps.insert(pos, space.random_gene(kind, rng))
    elif move == "remove":
        del steps[int(rng.integers(len(g.preprocessors)))]
    else:
        kinds = [k for k in space.classifiers if k != g.classifier.kind]
        steps[-1] = space.random_gene(kinds[int(rng.integers(len(kinds)))], rng)
    return space.validate(PipelineGenome(tuple(steps)))


def crossover(a: PipelineGenome, b: PipelineGenome, rng) -> PipelineGenome:
    """Preprocessing prefix from one parent, classifier from the other."""
    if rng.random() < 0.5:
        return PipelineGenome(a.preprocessors + (b.classifier,))
    return PipelineGenome(b.preprocessors + (a.classifier,))


# --------------------------------------------------------------------------- search


def rank_key(item):
    """Higher score first; fewer steps wins ties; canonical encoding settles the rest."""
    genome, score = item
    return (-score, len(genome), genome.encode())


def _tournament(ranked_pop, rng, size):
    picks = rng.integers(len(ranked_pop), size=size)
    return ranked_pop[int(picks.min())][0]  # population is sorted, lowest index = best


class _Evaluator:
    def __init__(self, ds, cfg):
        self.ds, self.cfg = ds, cfg
        self.memo = {}

    def score_all(self, genomes):
        new = sorted({g.encode(): g for g in genomes if g.encode() not in self.memo}.items())
        if new:
            todo = [g for _, g in new]
            fn = lambda g: score_genome(g, self.ds, self.cfg.cv, self.cfg.space)
            if self.cfg.threads == 1 or len(todo) == 1:
                scores = [fn(g) for g in todo]
            else:
                with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                    scores = list(pool.map(fn, todo))
            for (key, _), s in zip(new, scores):
                self.memo[key] = s
        return [self.memo[g.encode()] for g in genomes]


def evolve(ds: Dataset, cfg: EvolveConfig = EvolveConfig()):
    """Returns (best pipeline refitted on all of ``ds``, report)."""
    check_cv_feasible(ds, cfg.folds)
    start = time.perf_counter()
    space = cfg.space
    seed = cfg.seed & 0xFFFFFFFFFFFFFFFF
    ev = _Evaluator(ds, cfg)

    pop = [space.random_genome(np.random.default_rng([seed, 0, i])) for i in range(cfg.population)]
    records = []
    best = None
    for gen in range(cfg.generations + 1):
        if gen > 0:
            children = [g for g, _ in ranked[:cfg.elitism]]
            for slot in range(cfg.elitism, cfg.population):
                rng = np.random.default_rng([seed, gen, slot])
                child = _tournament(ranked, rng, cfg.tournament_size)
                if rng.random() < cfg.crossover_rate:
                    child = crossover(child, _tournament(ranked, rng, cfg.tournament_size), rng)
                if rng.random() < cfg.mutation_rate:
                    child = mutate(child, rng, space)
                children.append(child)
            pop = children
        ranked = sorted(zip(pop, ev.score_all(pop)), key=rank_key)
        if best is None or rank_key(ranked[0]) < rank_key(best):
            best = ranked[0]
        board, seen = [], set()
        for g, s in ranked:
            if g.encode() not in seen:
                seen.add(g.encode())
                board.append((g.encode(), s))
        records.append(GenerationRecord(gen, best[0].encode(), best[1], board[:5]))

    if not np.isfinite(best[1]):
        raise InfeasibleError("no genome in the search could be fitted")
    fitted = execute_pipeline(best[0], ds, space)
    report = EvolveReport(
        seed=cfg.seed, config=cfg.echo(), generations=records, evaluations=len(ev.memo),
        best_genome=best[0].encode(), best_score=best[1], wall_time_s=time.perf_counter() - start,
    )
    return fitted, report


def write_evolve_report(path, report: EvolveReport, meta: Optional[dict] = None):
    doc = report.to_dict()
    if meta is not None:
        doc["meta"] = meta
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
