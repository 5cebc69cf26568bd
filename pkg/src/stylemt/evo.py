"""Genetic search over per-family hyperparameter genomes.

A genome is a tuple of indices into each gene's declared value list, which
keeps mutation, crossover and hashing trivial. Decoding turns a genome into
(ModelConfig, TrainConfig) and repairs combinations the model builder would
reject (e.g. a patch_div that does not divide the trunk output).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

from .data.splits import SplitMix64, fnv1a64, mix64
from .errors import ConfigError, NumericError
from .model import ModelConfig
from .train import TrainConfig, cross_validate
from .vision import EncoderConfig

log = logging.getLogger(__name__)

LR_GRID = (3e-4, 1e-3, 3e-3, 1e-2, 3e-2)
BATCH_SIZES = (16, 32, 64)


@dataclass(frozen=True)
class Gene:
    name: str
    values: tuple


@dataclass(frozen=True)
class SearchSpace:
    family: str
    genes: tuple

    @property
    def names(self):
        return [g.name for g in self.genes]

    def values(self, genome):
        return {g.name: g.values[i] for g, i in zip(self.genes, genome)}

    def index_of(self, name, value):
        return self.gene(name).values.index(value)

    def gene(self, name):
        for g in self.genes:
            if g.name == name:
                return g
        raise KeyError(name)

    def random(self, rng):
        return tuple(rng.below(len(g.values)) for g in self.genes)

    def validate(self, genome):
        if len(genome) != len(self.genes):
            raise ConfigError(f"genome has {len(genome)} genes, space has {len(self.genes)}")
        for g, i in zip(self.genes, genome):
            if not 0 <= i < len(g.values):
                raise ConfigError(f"gene {g.name} index {i} outside its domain")
        return genome


_BOOL = (False, True)


def default_space(family):
    common = [Gene("batch_size", BATCH_SIZES), Gene("lr", LR_GRID)]
    if family in ("RTM", "RTMG"):
        genes = [Gene("truncate_layer", (1, 2, 3, 4)), *common, Gene("hidden_dims", (32, 64, 128)),
                 Gene("num_layers", (0, 1, 2)), Gene("use_attention", _BOOL)]
        if family == "RTMG":
            genes.append(Gene("gram_matrix_size", (8, 16, 32)))
    elif family == "PM":
        genes = [*common, Gene("patch_size", (2, 4, 8))]
    elif family == "PMG":
        genes = [*common, Gene("weight_decay", (0.0, 1e-4, 1e-3, 1e-2)), Gene("patch_size", (2, 4, 8)),
                 Gene("patch_div", (1, 2, 3, 4, 5, 8)), Gene("ndf", (8, 16, 32)),
                 Gene("gram_channels", (4, 8, 16)), Gene("d_model", (32, 64, 128)),
                 Gene("refiner_layers", (0, 1, 2)), Gene("refiner_heads", (1, 2, 4, 8)),
                 Gene("use_token_attention", _BOOL), Gene("use_channel_attention", _BOOL),
                 Gene("use_focal", _BOOL), Gene("focal_gamma", (0.5, 1.0, 2.0, 3.0))]
    else:
        raise ConfigError(f"unknown family {family!r}")
    return SearchSpace(family, tuple(genes))


def nearest_divisor(n, value):
    """Divisor of n closest to value; ties go to the smaller divisor."""
    divs = [d for d in range(1, n + 1) if n % d == 0]
    return min(divs, key=lambda d: (abs(d - value), d))


def _nearest_in(values, target, ok):
    cands = [v for v in values if ok(v)]
    return min(cands, key=lambda v: (abs(v - target), v)) if cands else None


def repair(genome, space, input_size=64):
    """Nearest valid genome; returns (genome, list of repair messages)."""
    vals = space.values(genome)
    notes = []
    if space.family == "PMG":
        ps = vals["patch_size"]
        hw = (input_size - ps) // ps + 1
        pd = vals["patch_div"]
        if hw % pd:
            new = _nearest_in(space.gene("patch_div").values, pd, lambda d: hw % d == 0)
            if new is None:
                new = 1
            notes.append(f"patch_div {pd} -> {new} (trunk output {hw}x{hw})")
            vals["patch_div"] = new
        dm, heads = vals["d_model"], vals["refiner_heads"]
        if dm % heads:
            new = _nearest_in(space.gene("refiner_heads").values, heads, lambda h: dm % h == 0)
            notes.append(f"refiner_heads {heads} -> {new} (d_model {dm})")
            vals["refiner_heads"] = new
    for msg in notes:
        log.info("repair: %s", msg)
    return tuple(space.index_of(g.name, vals[g.name]) for g in space.genes), notes


def decode(genome, space, taxonomy, base_model=None, base_train=None, input_size=64):
    """Genome -> (ModelConfig, TrainConfig, repair notes)."""
    space.validate(genome)
    genome, notes = repair(genome, space, input_size)
    v = space.values(genome)
    fam = space.family
    mc = base_model or ModelConfig(family=fam, taxonomy=taxonomy, input_size=input_size)
    tc = base_train or TrainConfig()
    tc = replace(tc, batch_size=v["batch_size"], lr=v["lr"])
    if fam in ("RTM", "RTMG"):
        enc = replace(mc.encoder if mc.encoder.family == "residual" else EncoderConfig(family="residual"),
                      truncate_after_layer=v["truncate_layer"])
        mc = replace(mc, family=fam, encoder=enc, hidden_dims=v["hidden_dims"], num_layers=v["num_layers"],
                     use_attention=v["use_attention"])
        if fam == "RTMG":
            mc = replace(mc, gram_matrix_size=v["gram_matrix_size"])
        tc = replace(tc, optimizer="sgd_momentum", momentum=0.9)
    else:
        enc = mc.encoder if mc.encoder.family == "patchgan" else EncoderConfig()
        enc = replace(enc, patch_size=v["patch_size"])
        mc = replace(mc, family=fam, encoder=enc)
        tc = replace(tc, optimizer="adamw", schedule="cosine")
        if fam == "PMG":
            enc = replace(enc, ndf=v["ndf"])
            mc = replace(mc, encoder=enc, patch_div=v["patch_div"], gram_channels=v["gram_channels"],
                         d_model=v["d_model"], refiner_layers=v["refiner_layers"],
                         refiner_heads=v["refiner_heads"], use_token_attention=v["use_token_attention"],
                         use_channel_attention=v["use_channel_attention"],
                         loss="focal" if v["use_focal"] else "weighted_ce", focal_gamma=v["focal_gamma"])
            tc = replace(tc, weight_decay=v["weight_decay"])
    mc = replace(mc, taxonomy=taxonomy)
    return mc.validate(), tc.validate(), notes


def mutate(genome, p, rng, space):
    """Each gene is resampled uniformly from its domain with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mutation probability {p} outside [0, 1]")
    out = list(genome)
    for i, g in enumerate(space.genes):
        if rng.random() < p:
            out[i] = rng.below(len(g.values))
    return tuple(out)


def crossover(a, b, p, rng):
    """Uniform crossover: each gene comes from b with probability p, else from a."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"crossover probability {p} outside [0, 1]")
    return tuple(gb if rng.random() < p else ga for ga, gb in zip(a, b))


def genome_key(genome):
    return hashlib.sha256(json.dumps(list(genome)).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# fitness


class StubFitness:
    """Negative squared index distance to a known optimum; no training."""

    def __init__(self, space, optimum=None):
        self.space = space
        self.optimum = tuple(optimum) if optimum is not None else tuple(len(g.values) // 2 for g in space.genes)
        self.calls = 0

    def __call__(self, genome, seed=0):
        self.calls += 1
        return 0.0 - sum((a - b) ** 2 for a, b in zip(genome, self.optimum))


class KFoldFitness:
    """Decode, then K-fold mean F1 at a fixed epoch budget."""

    def __init__(self, space, data, folds=2, epochs=3, base_model=None, base_train=None):
        self.space, self.data, self.folds, self.epochs = space, data, folds, epochs
        self.base_model, self.base_train = base_model, base_train
        self.calls = 0
        self.diagnostics = {}

    def __call__(self, genome, seed=0):
        self.calls += 1
        size = self.data.images.shape[-1]
        mc, tc, _ = decode(genome, self.space, self.data.taxonomy, self.base_model, self.base_train, size)
        tc = replace(tc, epochs=self.epochs, seed=seed, folds=self.folds)
        mc = replace(mc, seed=seed)
        try:
            score, _ = cross_validate(mc, tc, self.data, self.folds)
        except NumericError as e:
            self.diagnostics[genome_key(genome)] = str(e)
            return 0.0
        return score


# --------------------------------------------------------------------------
# the GA


@dataclass
class EvoConfig:
    population: int = 12
    generations: int = 10
    tournament: int = 3
    elitism: int = 1
    mutation_p: float = 0.2
    crossover_p: float = 0.9
    seed: int = 0
    folds: int = 2
    budget_epochs: int = 3

    def validate(self):
        if self.population < 2:
            raise ConfigError("population must be >= 2")
        if not 0 <= self.elitism < self.population:
            raise ConfigError("elitism must be in [0, population)")
        if self.tournament < 1:
            raise ConfigError("tournament size must be >= 1")
        if self.generations < 0:
            raise ConfigError("generations must be >= 0")
        for p in (self.mutation_p, self.crossover_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("probabilities must be in [0, 1]")
        return self


@dataclass
class EvoResult:
    best_genome: tuple
    best_fitness: float
    log: list = field(default_factory=list)
    evaluations: int = 0


def individual_seed(seed, genome):
    """Training seed for an individual; a function of the genome so memoised
    and parallel evaluations agree."""
    return mix64((seed & ((1 << 64) - 1)) ^ fnv1a64(genome_key(genome))) & 0x7FFFFFFF


def _tournament(pop, fit, k, rng):
    best = None
    for _ in range(k):
        i = rng.below(len(pop))
        if best is None or fit[i] > fit[best] or (fit[i] == fit[best] and i < best):
            best = i
    return pop[best]


def _ranked(pop, fit):
    return sorted(range(len(pop)), key=lambda i: (-fit[i], i))


def evolve(cfg: EvoConfig, space, fitness, checkpoint=None, resume=False, workers=1, stop_after=None):
    """Run the GA. With ``checkpoint`` the state is written after every
    generation; ``resume`` continues from it. ``stop_after`` ends the run
    after that generation index (used to simulate interruption)."""
    cfg.validate()
    cache = {}

    def evaluate(genomes):
        todo = []
        for g in genomes:
            k = genome_key(g)
            if k not in cache and k not in {genome_key(t) for t in todo}:
                todo.append(g)
        if workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(workers) as ex:
                vals = list(ex.map(lambda g: fitness(g, individual_seed(cfg.seed, g)), todo))
        else:
            vals = [fitness(g, individual_seed(cfg.seed, g)) for g in todo]
        for g, v in zip(todo, vals):
            cache[genome_key(g)] = float(v)
        return [cache[genome_key(g)] for g in genomes]

    def record(gen, pop, fit):
        order = _ranked(pop, fit)
        return {"generation": gen, "best_fitness": fit[order[0]], "mean_fitness": sum(fit) / len(fit),
                "best_genome": list(pop[order[0]]),
                "population": [{"genome": list(g), "fitness": f, "seed": individual_seed(cfg.seed, g)}
                               for g, f in zip(pop, fit)]}

    def save(gen, pop, fit, history):
        if checkpoint is None:
            return
        state = {"format": "stylemt-evo 1", "config": asdict(cfg), "family": space.family, "generation": gen,
                 "population": [list(g) for g in pop], "fitness": fit, "log": history,
                 "cache": dict(sorted(cache.items()))}
        tmp = checkpoint + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True, indent=1)
        os.replace(tmp, checkpoint)

    if resume and checkpoint and os.path.exists(checkpoint):
        with open(checkpoint, encoding="utf-8") as fh:
            state = json.load(fh)
        if state.get("config") != asdict(cfg) or state.get("family") != space.family:
            raise ConfigError("checkpoint was written by a different search configuration")
        start = state["generation"] + 1
        pop = [tuple(g) for g in state["population"]]
        fit = list(state["fitness"])
        history = state["log"]
        cache.update(state["cache"])
    else:
        rng = SplitMix64.for_stream(cfg.seed, "init")
        pop = [repair(space.random(rng), space)[0] for _ in range(cfg.population)]
        fit = evaluate(pop)
        history = [record(0, pop, fit)]
        save(0, pop, fit, history)
        start = 1
        if stop_after == 0:
            return _result(pop, fit, history, cache)

    for gen in range(start, cfg.generations + 1):
        rng = SplitMix64.for_stream(cfg.seed, f"generation-{gen}")
        order = _ranked(pop, fit)
        children = [pop[i] for i in order[:cfg.elitism]]
        while len(children) < cfg.population:
            a = _tournament(pop, fit, cfg.tournament, rng)
            b = _tournament(pop, fit, cfg.tournament, rng)
            child = crossover(a, b, 0.5, rng) if rng.random() < cfg.crossover_p else a
            child = mutate(child, cfg.mutation_p, rng, space)
            children.append(repair(child, space)[0])
        pop = children
        fit = evaluate(pop)
        history.append(record(gen, pop, fit))
        save(gen, pop, fit, history)
        log.info("generation %d best %.4f mean %.4f", gen, history[-1]["best_fitness"],
                 history[-1]["mean_fitness"])
        if stop_after is not None and gen >= stop_after:
            break
    return _result(pop, fit, history, cache)


def _result(pop, fit, history, cache):
    best = max(history, key=lambda r: r["best_fitness"])
    return EvoResult(tuple(best["best_genome"]), best["best_fitness"], history, len(cache))


def format_log(history):
    """Generation log as JSON lines."""
    return "".join(json.dumps({k: r[k] for k in ("generation", "best_fitness", "mean_fitness", "best_genome")})
                   + "\n" for r in history)
