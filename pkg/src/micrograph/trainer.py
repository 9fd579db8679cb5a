"""Joint EM training loop: segmentation, motif assignment and the three-term loss."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffnum as dn
from .contrastive import contrast_matrix, contrastive_loss
from .encoder import EncoderParams, aggregate_many, encode_nodes, init_encoder
from .graph import Graph, GraphBatch, Subgraph, make_batches
from .motif import MotifTable, init_motifs, motif_loss, motif_similarity, sinkhorn_assign
from .segmenter import (
    SAMPLERS,
    affinity,
    default_num_segments,
    extract_subgraphs,
    passing_subgraphs,
    segmenter_loss,
    spectral_segment,
)

log = logging.getLogger(__name__)

SAMPLER_CHOICES = ("motif", "rw", "khop")

# dotted aliases accepted in config files
CONFIG_ALIASES = {
    "encoder.layers": "encoder_layers",
    "encoder.hidden_dim": "encoder_hidden_dim",
    "segmenter.tau_n": "tau_n",
    "segmenter.top_fraction": "top_fraction",
    "segmenter.max_segments": "max_segments",
    "contrastive.normalize": "contrastive_normalize",
    "motif.k": "num_motifs",
    "K": "num_motifs",
    "sinkhorn.lambda": "sinkhorn_lambda",
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lambda_m: float = 1.0
    lambda_s: float = 0.1
    lambda_c: float = 1.0
    tau_g: float = 0.2
    tau_n: float = 0.1
    sinkhorn_lambda: float = 20.0
    sinkhorn_iters: int = 300
    sinkhorn_tol: float = 1e-6
    num_motifs: int = 10
    top_fraction: float = 0.1
    max_segments: int = 10
    encoder_layers: int = 3
    encoder_hidden_dim: int = 64
    sampler: str = "motif"
    contrastive_normalize: str = "graphs"
    warmup_epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("tau_g", "tau_n", "sinkhorn_lambda", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        weights = (self.lambda_m, self.lambda_s, self.lambda_c)
        if min(weights) < 0:
            raise ConfigError("loss weights must be >= 0")
        if max(weights) == 0:
            raise ConfigError("at least one loss weight must be > 0")
        for name in ("epochs", "batch_size", "num_motifs", "encoder_layers", "encoder_hidden_dim",
                     "max_segments", "sinkhorn_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.sampler not in SAMPLER_CHOICES:
            raise ConfigError(f"sampler must be one of {SAMPLER_CHOICES}")
        if self.contrastive_normalize not in ("graphs", "subgraphs"):
            raise ConfigError("contrastive_normalize must be 'graphs' or 'subgraphs'")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in d.items():
            name = CONFIG_ALIASES.get(key, key)
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[name] = _coerce(value, types[name], key)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_dict(parse_config_text(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def parse_config_text(text: str) -> dict:
    """Raw key=value pairs of a config file; ``#`` starts a comment."""
    d = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        d[key] = value
    return d


def _coerce(value, typ, key):
    try:
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None


@dataclass
class Model:
    encoder: EncoderParams
    motifs: MotifTable

    def parameters(self) -> list:
        return self.encoder.parameters() + [self.motifs.vectors]

    def named_tensors(self) -> dict:
        named = dict(self.encoder.named_tensors())
        named["motifs"] = self.motifs.vectors
        return named

    @classmethod
    def from_named(cls, named: dict) -> "Model":
        return cls(EncoderParams.from_named(named), MotifTable(dn.Tensor(named["motifs"], requires_grad=True)))


def init_model(in_dim: int, config: TrainConfig, rng: np.random.Generator) -> Model:
    enc = init_encoder(in_dim, config.encoder_hidden_dim, config.encoder_layers, rng)
    return Model(enc, init_motifs(config.num_motifs, config.encoder_hidden_dim, rng))


@dataclass
class TrainState:
    model: Model
    adam: dn.AdamState
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    clusters: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, in_dim: int, config: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(config.seed)
        model = init_model(in_dim, config, rng)
        return cls(model, dn.AdamState.for_params(model.parameters(), lr=config.lr), rng)


@dataclass
class StepResult:
    loss: float
    loss_m: float
    loss_s: float
    loss_c: float
    num_subgraphs: int
    slot_counts: np.ndarray


# --- sampling --------------------------------------------------------------

def sample_subgraphs(batch: GraphBatch, node_data: np.ndarray, config: TrainConfig, seed_base: int,
                     sampler: Optional[str] = None) -> list[Subgraph]:
    """Subgraphs for every graph of ``batch`` using its current node embeddings.

    Each graph draws from its own generator seeded by (seed_base, position).
    """
    sampler = sampler or config.sampler
    subs = []
    for i, g in enumerate(batch.graphs):
        seed = [seed_base, i]
        if sampler == "motif":
            with dn.no_grad():
                aff = affinity(dn.Tensor(node_data[batch.node_slice(i)]), config.tau_n)
            k = default_num_segments(g.num_nodes, config.max_segments)
            labels = spectral_segment(aff, k, seed)
            subs += extract_subgraphs(g, labels)
        else:
            subs += SAMPLERS[sampler](g, seed, default_num_segments(g.num_nodes, config.max_segments))
    return subs


def _parent_positions(batch: GraphBatch, subs: Sequence[Subgraph]) -> list[int]:
    pos = {g.id: i for i, g in enumerate(batch.graphs)}
    return [pos[s.parent_id] for s in subs]


def _subgraph_rows(batch: GraphBatch, subs: Sequence[Subgraph], parents: Sequence[int]) -> list:
    return [[batch.offsets[p] + v for v in s.node_indices] for s, p in zip(subs, parents)]


def _graph_rows(batch: GraphBatch) -> list:
    return [range(batch.offsets[i], batch.offsets[i + 1]) for i in range(len(batch))]


# --- training --------------------------------------------------------------

def train_step(batch: GraphBatch, state: TrainState, config: TrainConfig,
               lambda_s: Optional[float] = None) -> Optional[StepResult]:
    """One EM step on ``batch``; returns None (and leaves parameters alone) if no subgraph was sampled."""
    lambda_s = config.lambda_s if lambda_s is None else lambda_s
    model = state.model
    seed_base = int(state.rng.integers(2**62))
    tape = dn.Tape()
    with dn.use_tape(tape):
        nodes = encode_nodes(batch, model.encoder)
        subs = sample_subgraphs(batch, nodes.data, config, seed_base)
        if not subs:
            log.warning("step %d: batch produced no subgraphs, skipping", state.step)
            return None
        parents = _parent_positions(batch, subs)
        h = aggregate_many(nodes, _graph_rows(batch))
        e = aggregate_many(nodes, _subgraph_rows(batch, subs, parents))

        sim = motif_similarity(model.motifs, e, config.tau_g)
        s_const = sim.s.data.copy()
        q = sinkhorn_assign(s_const, config.sinkhorn_lambda, config.sinkhorn_iters, config.sinkhorn_tol)

        loss_m = motif_loss(q, sim.s_tilde)
        loss_c = contrastive_loss(contrast_matrix(h, e, config.tau_g, parents, config.contrastive_normalize))
        if config.sampler == "motif":
            if lambda_s > 0:
                loss_s = _segmenter_term(batch, nodes, subs, s_const, config)
            else:
                with dn.no_grad():
                    loss_s = _segmenter_term(batch, nodes, subs, s_const, config)
        else:
            loss_s = dn.Tensor(0.0)

        joint = dn.add(dn.add(dn.scale(loss_m, config.lambda_m), dn.scale(loss_s, lambda_s)),
                       dn.scale(loss_c, config.lambda_c))
        lm, ls, lc = loss_m.item(), loss_s.item(), loss_c.item()
        total = joint.item()
        if total != (config.lambda_m * lm + lambda_s * ls) + config.lambda_c * lc:
            raise AssertionError("joint loss differs from the weighted sum of its terms")
        if not np.isfinite(total):
            raise dn.NonFiniteError(f"step {state.step}: non-finite loss")

        params = model.parameters()
        for p in params:
            p.grad = None
        dn.backward(joint, tape)
    dn.adam_step(params, [p.grad for p in params], state.adam)
    for p in params:
        p.grad = None
    state.step += 1
    counts = np.bincount(s_const.argmax(axis=0), minlength=model.motifs.k)
    return StepResult(total, lm, ls, lc, len(subs), counts)


def _segmenter_term(batch, nodes, subs, s_const, config) -> dn.Tensor:
    passing = passing_subgraphs(s_const, config.top_fraction)
    wanted = sorted({s.parent_id for s, ok in zip(subs, passing) if ok})
    pos = {g.id: i for i, g in enumerate(batch.graphs)}
    affs = {pid: affinity(dn.take_rows(nodes, batch.node_slice(pos[pid])), config.tau_n) for pid in wanted}
    return segmenter_loss(affs, subs, s_const, config.top_fraction)


METRIC_FIELDS = ("step", "L", "L_m", "L_s", "L_c", "epoch", "num_subgraphs")


def run_epoch(dataset: Sequence[Graph], state: TrainState, config: TrainConfig) -> None:
    epoch = state.epoch + 1
    lambda_s = 0.0 if epoch <= config.warmup_epochs else config.lambda_s
    batches = make_batches(dataset, config.batch_size, int(state.rng.integers(2**62)))
    counts = np.zeros(config.num_motifs, dtype=np.int64)
    for batch in batches:
        res = train_step(batch, state, config, lambda_s)
        if res is None:
            continue
        counts += res.slot_counts
        state.history.append({
            "step": state.step, "L": res.loss, "L_m": res.loss_m, "L_s": res.loss_s,
            "L_c": res.loss_c, "epoch": epoch, "num_subgraphs": res.num_subgraphs,
        })
    state.clusters[epoch] = counts.tolist()
    state.epoch = epoch


def metrics_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in history:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_FIELDS])
    return buf.getvalue()


def clusters_csv(counts: Sequence[int]) -> str:
    return "slot,count\n" + "".join(f"{k},{c}\n" for k, c in enumerate(counts))


def epoch_means(history: Sequence[dict], key: str) -> dict:
    sums: dict = {}
    for row in history:
        sums.setdefault(row["epoch"], []).append(row[key])
    return {e: float(np.mean(v)) for e, v in sorted(sums.items())}


# --- checkpoints -----------------------------------------------------------

def save_state(path, state: TrainState, config: TrainConfig) -> None:
    in_dim = state.model.encoder.in_dim
    extra = {
        "config": config.to_dict(),
        "in_dim": in_dim,
        "epoch": state.epoch,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
        "clusters": {str(k): v for k, v in state.clusters.items()},
    }
    dn.save_checkpoint(path, state.model.named_tensors(), state.adam, extra)


def load_state(path):
    """Returns (TrainState, TrainConfig) from a checkpoint file."""
    try:
        tensors, adam, extra = dn.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"cannot load checkpoint {path}: {exc}") from exc
    config = TrainConfig.from_dict(extra["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng_state"]
    state = TrainState(Model.from_named(tensors), adam, rng, extra["epoch"], extra["step"],
                       list(extra["history"]), {int(k): v for k, v in extra["clusters"].items()})
    return state, config


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch_{epoch}.json"


def pretrain(dataset: Sequence[Graph], config: TrainConfig, out_dir=None,
             resume_from=None, stop_after: Optional[int] = None) -> TrainState:
    """Run ``config.epochs`` epochs (or until ``stop_after``), writing checkpoints and CSV logs to ``out_dir``."""
    if not dataset:
        raise ValueError("empty dataset")
    if resume_from is not None:
        state, saved = load_state(resume_from)
        if saved != config:
            log.warning("resuming with a config that differs from the checkpoint")
    else:
        state = TrainState.fresh(dataset[0].num_features, config)
    if dataset[0].num_features != state.model.encoder.in_dim:
        raise ValueError("dataset feature dimension does not match the model")
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    while state.epoch < last:
        run_epoch(dataset, state, config)
        means = epoch_means([r for r in state.history if r["epoch"] == state.epoch], "L")
        log.info("epoch %d: mean loss %s", state.epoch, means.get(state.epoch))
        if out is not None:
            try:
                save_state(out / checkpoint_name(state.epoch), state, config)
                (out / "metrics.csv").write_text(metrics_csv(state.history), encoding="utf-8")
                (out / f"clusters_epoch_{state.epoch}.csv").write_text(
                    clusters_csv(state.clusters[state.epoch]), encoding="utf-8")
            except OSError as exc:
                raise OSError(f"writing training outputs to {out}: {exc}") from exc
    return state


# --- inference -------------------------------------------------------------

def _chunks(dataset: Sequence[Graph], size: int):
    for k in range(0, len(dataset), size):
        yield GraphBatch(tuple(dataset[k:k + size]))


def node_embeddings(dataset: Sequence[Graph], encoder: EncoderParams, chunk: int = 256):
    """Yields (batch, node embedding array) over ``dataset`` in order, without gradients."""
    with dn.no_grad():
        for batch in _chunks(dataset, chunk):
            yield batch, encode_nodes(batch, encoder).data


def extract_features(dataset: Sequence[Graph], checkpoint) -> np.ndarray:
    """Frozen-encoder mean-pooled graph embeddings (M x D), in dataset order.

    ``checkpoint`` may be a path, a TrainState or a Model.
    """
    model = _model_of(checkpoint)
    if dataset and dataset[0].num_features != model.encoder.in_dim:
        raise ValueError(
            f"dataset has {dataset[0].num_features} features, checkpoint expects {model.encoder.in_dim}")
    rows = []
    for batch, nodes in node_embeddings(dataset, model.encoder):
        for i in range(len(batch)):
            rows.append(nodes[batch.node_slice(i)].mean(axis=0))
    return np.array(rows)


def _model_of(obj) -> Model:
    if isinstance(obj, Model):
        return obj
    if isinstance(obj, TrainState):
        return obj.model
    return load_state(obj)[0].model


@dataclass
class Segmented:
    """Subgraphs of a dataset with their embeddings and motif similarities."""
    subgraphs: list
    embeddings: np.ndarray
    graph_embeddings: np.ndarray
    s: np.ndarray
    s_tilde: np.ndarray


def segment_dataset(dataset: Sequence[Graph], model, config: TrainConfig, seed: int = 0,
                    sampler: Optional[str] = None, chunk: int = 256) -> Segmented:
    model = _model_of(model)
    subs, embs, graphs = [], [], []
    for b, (batch, nodes) in enumerate(node_embeddings(dataset, model.encoder, chunk)):
        found = sample_subgraphs(batch, nodes, config, seed * 100003 + b, sampler)
        parents = _parent_positions(batch, found)
        for s, rows in zip(found, _subgraph_rows(batch, found, parents)):
            subs.append(s)
            embs.append(nodes[rows].mean(axis=0))
        for i in range(len(batch)):
            graphs.append(nodes[batch.node_slice(i)].mean(axis=0))
    d = model.encoder.hidden_dim
    e = np.array(embs).reshape(-1, d)
    if len(subs):
        with dn.no_grad():
            sim = motif_similarity(model.motifs, dn.Tensor(e), config.tau_g)
        s, st = sim.s.data, sim.s_tilde.data
    else:
        s = st = np.zeros((model.motifs.k, 0))
    return Segmented(subs, e, np.array(graphs), s, st)
