"""Training loop, per-epoch logging and checkpoint serialization."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields

import numpy as np

from .config import RunConfig
from .dataio import Dataset, FormatError, pack_block, unpack_block
from .evaluation import EvalError, closed_world_eval
from .model import DefaModel
from .nn import Adam, make_rng
from .space import count_frequencies

LOG_COLUMNS = ("epoch", "total", "cla", "dis", "rec", "pair", "cart",
               "val_seen", "val_unseen", "val_hm", "val_auc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: DefaModel
    config: RunConfig
    history: list = field(default_factory=list)   # dict rows keyed by LOG_COLUMNS
    best_epoch: int = -1
    best_auc: float = float("nan")


def history_to_csv(history) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                              for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def train(dataset: Dataset, cfg: RunConfig, verbose: bool = False) -> TrainResult:
    """Optimize all parameters; returns the best-by-validation-AUC state.

    Deterministic for a fixed config and seed: initialization, batch order
    and gradient reduction are all driven by seeded generators, and losses
    that become non-finite abort with the offending component named.
    """
    train_samples = dataset.samples["train"]
    if not train_samples:
        raise TrainingError("empty training set")
    space = dataset.spaces["train"]
    freq = count_frequencies(train_samples, space)
    model = DefaModel(space, dataset.d_backbone, cfg.model_config(),
                      seed=cfg.seed, freq=freq, debias=cfg.debias_config())
    weights = cfg.loss_weights()
    opt = Adam(model.store, lr=cfg.lr)
    batch_rng = make_rng(cfg.seed + 1_000_003)

    feats = np.stack([s.feature for s in train_samples])
    attr_labels = np.array([s.attr for s in train_samples], dtype=np.int64)
    obj_labels = np.array([s.obj for s in train_samples], dtype=np.int64)
    n = len(train_samples)

    result = TrainResult(model, cfg)
    best_state = None
    for epoch in range(cfg.epochs):
        perm = batch_rng.permutation(n)
        sums = {k: 0.0 for k in ("total", "cla", "dis", "rec", "pair", "cart")}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            model.store.zero_grads()
            terms = model.batch_terms(feats[idx], attr_labels[idx],
                                      obj_labels[idx], weights)
            for name, t in terms.items():
                if not np.isfinite(t.data):
                    raise TrainingError(
                        f"loss component {name!r} became non-finite "
                        f"({float(t.data)}) at epoch {epoch}")
            terms["total"].backward()
            opt.step()
            for key in sums:
                if key in terms:
                    sums[key] += float(terms[key].data) * idx.size

        row = {c: 0.0 for c in LOG_COLUMNS}
        row["epoch"] = epoch
        for key, val in sums.items():
            row[key] = val / n
        row.update(_validation_metrics(model, dataset, weights, cfg.threads))
        result.history.append(row)
        if verbose:
            print(f"epoch {epoch:3d}  total={row['total']:.4f}  "
                  f"val_auc={row['val_auc']:.4f}")
        if np.isfinite(row["val_auc"]) and \
                (best_state is None or row["val_auc"] > result.best_auc):
            result.best_auc = row["val_auc"]
            result.best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in model.store.items()}

    if best_state is not None:
        for name, t in model.store.items():
            t.data[...] = best_state[name]
    return result


def _validation_metrics(model, dataset, weights, threads):
    out = {"val_seen": float("nan"), "val_unseen": float("nan"),
           "val_hm": float("nan"), "val_auc": float("nan")}
    val = dataset.samples.get("val", [])
    if not val:
        return out
    try:
        report = closed_world_eval(model, val, dataset.spaces["val"], weights,
                                   threads=threads)
    except EvalError:
        return out
    out.update(val_seen=report.seen_best, val_unseen=report.unseen_best,
               val_hm=report.hm_best, val_auc=report.auc)
    return out


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_HEAD = "defa-checkpoint\t1"
_END_HEADER = b"#end-header\n"


def save_checkpoint(path, model: DefaModel, cfg: RunConfig) -> None:
    """Text config header + one float64 container block per named tensor."""
    lines = [_CKPT_HEAD,
             f"d_backbone\t{model.d_backbone}",
             f"n_attrs\t{model.space.n_attrs}",
             f"n_objs\t{model.space.n_objs}"]
    for f in fields(RunConfig):
        lines.append(f"config\t{f.name}\t{getattr(cfg, f.name)!r}")
    header = ("\n".join(lines) + "\n").encode("utf-8") + _END_HEADER

    blocks = []
    named = list(model.store.items()) + [
        (f"context/{kind}", None) for kind in model.tokens.contexts]
    for name, tensor in named:
        data = model.tokens.contexts[name.split("/", 1)[1]] if tensor is None \
            else tensor.data
        if "|" in name:
            raise FormatError(f"parameter name {name!r} contains '|'")
        shape = ",".join(str(s) for s in data.shape)
        blocks.append(pack_block([f"{name}|{shape}"], data.reshape(1, -1),
                                 version=2, checksum=True))
    with open(path, "wb") as f:
        f.write(header)
        for b in blocks:
            f.write(b)


def _parse_header(raw: bytes):
    cut = raw.find(_END_HEADER)
    if cut < 0:
        raise FormatError("checkpoint header terminator missing")
    lines = raw[:cut].decode("utf-8").rstrip("\n").split("\n")
    if not lines or lines[0] != _CKPT_HEAD:
        raise FormatError("not a checkpoint file")
    meta, config = {}, {}
    for ln in lines[1:]:
        parts = ln.split("\t")
        if parts[0] == "config" and len(parts) == 3:
            config[parts[1]] = parts[2]
        elif len(parts) == 2:
            meta[parts[0]] = parts[1]
        else:
            raise FormatError(f"malformed checkpoint header line: {ln!r}")
    return meta, config, cut + len(_END_HEADER)


def _coerce_config(raw: dict) -> RunConfig:
    kwargs = {}
    for f in fields(RunConfig):
        if f.name not in raw:
            continue
        text = raw[f.name]
        if f.type == "bool":
            kwargs[f.name] = text == "True"
        elif f.type == "int":
            kwargs[f.name] = int(text)
        elif f.type == "float":
            kwargs[f.name] = float(text)
        else:
            kwargs[f.name] = text.strip("'\"")
    return RunConfig(**kwargs)


def load_checkpoint(path, space) -> tuple[DefaModel, RunConfig]:
    """Rebuild the model for `space` and restore every tensor bit-exactly."""
    with open(path, "rb") as f:
        raw = f.read()
    meta, raw_cfg, offset = _parse_header(raw)
    cfg = _coerce_config(raw_cfg)
    d_backbone = int(meta["d_backbone"])
    if int(meta["n_attrs"]) != space.n_attrs or int(meta["n_objs"]) != space.n_objs:
        raise FormatError(
            f"checkpoint was trained on a {meta['n_attrs']}x{meta['n_objs']} "
            f"vocabulary; manifest has {space.n_attrs}x{space.n_objs}")

    model = DefaModel(space, d_backbone, cfg.model_config(), seed=cfg.seed)
    buf = io.BytesIO(raw[offset:])
    loaded = {}
    while buf.tell() < len(raw) - offset:
        ids, mat = unpack_block(buf, expect_version=2, expect_checksum=True)
        name, shape_txt = ids[0].split("|")
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        loaded[name] = mat.reshape(shape)

    expected = set(model.store.names()) | {f"context/{k}" for k in model.tokens.contexts}
    if set(loaded) != expected:
        missing = sorted(expected - set(loaded))[:3]
        extra = sorted(set(loaded) - expected)[:3]
        raise FormatError(f"checkpoint tensor mismatch: missing {missing}, extra {extra}")
    for name, arr in loaded.items():
        if name.startswith("context/"):
            kind = name.split("/", 1)[1]
            if model.tokens.contexts[kind].shape != arr.shape:
                raise FormatError(f"shape mismatch for {name}")
            model.tokens.contexts[kind] = arr
        else:
            t = model.store[name]
            if t.data.shape != arr.shape:
                raise FormatError(f"shape mismatch for {name}: "
                                  f"{t.data.shape} vs {arr.shape}")
            t.data[...] = arr
    return model, cfg
