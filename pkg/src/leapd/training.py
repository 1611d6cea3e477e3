"""One-step joint training of detector, squeeze network and prompts.

Every batch computes the detection loss and the three domain terms in a single
forward pass and applies one SGD-with-momentum update to all trainable
parameters. Checkpoints can be stripped down to the detector alone, which is
all inference needs.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import __version__
from .alignment import (
    TERM_NAMES,
    LossBreakdown,
    SqueezeNet,
    combine,
    dissimilarity_score,
    domain_invariant_loss,
    domain_specific_loss,
    prompt_ce_from_logits,
    similarity_score,
    total_loss,
)
from .config import DomainLabel, RunConfig, Seeds, dump_config, parse_config_text, seed_all, seeded
from .detector import Detector, detection_loss, select_alignment_feature
from .encoders import ImageEncoder, TextEncoder
from .prompting import ManualPrompts, PromptBank, init_prompt_bank, prompt_embeddings

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LEAPDCKP"
CHECKPOINT_VERSION = 1
DOMAIN_PREFIXES = ("image_encoder.", "text_encoder.", "fsn.", "prompt_bank")


class TrainingError(RuntimeError):
    pass


class LeapdModel(nn.Module):
    """Detector plus the training-only vision-language branch.

    The branch (encoders, squeeze network, prompts) is absent for
    ``detector_only`` runs and after :func:`strip_domain_modules`.
    """

    def __init__(self, config: RunConfig, categories: Sequence[str], domains: Sequence[DomainLabel],
                 in_channels: int = 3, with_domain_modules: bool | None = None):
        super().__init__()
        self.config = config
        self.categories = tuple(categories)
        self.domains = list(domains)
        self.in_channels = in_channels
        seeds = Seeds(config.seed)
        with seeded(seeds, "detector"):
            self.detector = Detector(len(self.categories), config.strides, config.pyramid_channels, in_channels)
        if with_domain_modules is None:
            with_domain_modules = config.prompt_mode != "detector_only"
        self.image_encoder = self.text_encoder = self.fsn = self.prompt_bank = None
        self.manual_prompts = None
        if with_domain_modules:
            n_sc = config.n_sc or len(self.domains)
            if n_sc < 1:
                raise ValueError("at least one shooting-condition class is required")
            with seeded(seeds, "image_encoder"):
                self.image_encoder = ImageEncoder(config.embed_dim, in_channels)
            with seeded(seeds, "text_encoder"):
                self.text_encoder = TextEncoder(config.embed_dim, config.token_dim, config.text_hidden,
                                                config.vocab_size, max(config.max_seq_len, config.prompt_len))
            with seeded(seeds, "fsn"):
                self.fsn = SqueezeNet(config.pyramid_channels, config.embed_dim)
            if config.prompt_mode == "learnable":
                self.prompt_bank = init_prompt_bank(config.prompt_len, n_sc, config.token_dim,
                                                    seeds.torch("prompts"))
            else:
                if len(self.domains) != n_sc:
                    raise ValueError("manual prompts need one known domain per class")
                self.manual_prompts = ManualPrompts(self.domains)
        self.double()
        self.apply_freezing()

    @property
    def has_domain_modules(self) -> bool:
        return self.fsn is not None

    @property
    def prompts(self) -> PromptBank | ManualPrompts:
        return self.manual_prompts if self.config.prompt_mode == "manual" else self.prompt_bank

    def apply_freezing(self) -> None:
        if not self.has_domain_modules:
            return
        self.image_encoder.requires_grad_(not self.config.freeze_image_encoder)
        self.text_encoder.requires_grad_(not self.config.text_encoder_frozen)


# -- optimizer ---------------------------------------------------------------


class SGDMomentum:
    """``v <- mu v - lr (g + wd theta)``, ``theta <- theta + v``.

    Parameters without a gradient in a step are left untouched (and their
    buffers are not advanced). Names in ``no_decay`` skip weight decay.
    """

    def __init__(self, named_params, lr: float, momentum: float, weight_decay: float = 0.0,
                 no_decay: Sequence[str] = (), decay_mode: str = "weight_decay"):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.decay_mode = decay_mode
        self.buffers = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.steps = 0

    def current_lr(self) -> float:
        if self.decay_mode == "schedule":
            return self.lr / (1.0 + self.weight_decay * self.steps)
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        lr = self.current_lr()
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.decay_mode == "weight_decay" and self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p
            buf = self.buffers[name]
            buf.mul_(self.momentum).add_(g, alpha=-lr)
            p.add_(buf)
        self.steps += 1


# -- state and steps ---------------------------------------------------------


@dataclass
class TrainState:
    model: LeapdModel
    optimizer: SGDMomentum
    config: RunConfig
    epoch: int = 0
    step: int = 0
    # "joint" (one-step), or the two phases of the two-step baseline: "prompts", "detector"
    phase: str = "joint"
    shuffle_rng: np.random.Generator = field(default=None, repr=False)


def _all_params(model: LeapdModel) -> list[tuple[str, torch.Tensor]]:
    return [(n, p) for n, p in model.named_parameters()]


def init_state(config: RunConfig, categories: Sequence[str], domains: Sequence[DomainLabel],
               in_channels: int = 3, model: LeapdModel | None = None) -> TrainState:
    seeds = seed_all(config.seed)
    if model is None:
        model = LeapdModel(config, categories, domains, in_channels)
    opt = SGDMomentum(_all_params(model), config.lr, config.momentum, config.weight_decay,
                      no_decay=[n for n, _ in model.named_parameters() if n.startswith("prompt_bank")],
                      decay_mode=config.decay_mode)
    return TrainState(model, opt, config, shuffle_rng=seeds.numpy("shuffle"))


def _stack(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).to(torch.float64)


def _effective_lambdas(state: TrainState) -> tuple[float, float, float, float]:
    lam = state.config.lambdas
    if state.config.prompt_mode == "detector_only":
        return (lam[0], 0.0, 0.0, 0.0)
    if state.phase == "prompts":
        return (0.0, lam[1], 0.0, 0.0)
    return lam


def compute_losses(model: LeapdModel, samples, lambdas=None) -> dict[str, torch.Tensor]:
    """Differentiable loss terms for a list of samples sharing one image shape."""
    cfg = model.config
    x = _stack(samples)
    pyramid = model.detector.extract_pyramid(x)
    zero = torch.zeros((), dtype=torch.float64)
    terms = {"L_od": detection_loss(model.detector, pyramid, [(s.boxes, s.ignored) for s in samples])}
    if cfg.prompt_mode == "detector_only" or not model.has_domain_modules:
        terms.update(L_lp=zero, L_di=zero, L_ds=zero)
        return terms
    classes = torch.tensor([s.domain.class_index for s in samples])
    with torch.set_grad_enabled(torch.is_grad_enabled() and not cfg.freeze_image_encoder):
        v = model.image_encoder(x)
    t = prompt_embeddings(model.prompts, model.text_encoder)
    f_sq = model.fsn(select_alignment_feature(pyramid, cfg.align_level))
    terms["L_lp"] = prompt_ce_from_logits(v, t, cfg.temperature, classes)
    s = similarity_score(v, f_sq, cfg.clamp_eps)
    terms["L_di"] = domain_invariant_loss(s).mean()
    if cfg.ds_target == "own":
        ds = dissimilarity_score(t[classes], f_sq, cfg.clamp_eps)[:, None]
    else:
        ds = dissimilarity_score(t[None], f_sq[:, None], cfg.clamp_eps)
    terms["L_ds"] = domain_specific_loss(ds).mean()
    return terms


def batch_losses(model: LeapdModel, batch) -> dict[str, torch.Tensor]:
    """Like :func:`compute_losses` but tolerates mixed image sizes (size-weighted mean)."""
    groups: dict[tuple, list] = {}
    for s in batch:
        groups.setdefault(s.image.shape, []).append(s)
    if len(groups) == 1:
        return compute_losses(model, batch)
    out = {k: 0.0 for k in TERM_NAMES}
    for samples in groups.values():
        part = compute_losses(model, samples)
        for k in TERM_NAMES:
            out[k] = out[k] + part[k] * (len(samples) / len(batch))
    return out


def _check_capability(state: TrainState) -> None:
    cfg = state.config
    if cfg.prompt_mode != "detector_only" and not state.model.has_domain_modules \
            and any(l > 0 for l in cfg.lambdas[1:]):
        raise TrainingError("domain modules absent: this checkpoint was stripped for inference")


def train_step(state: TrainState, batch) -> tuple[TrainState, LossBreakdown]:
    """One forward pass over ``batch`` and one optimizer update."""
    if not batch:
        raise TrainingError("empty batch")
    _check_capability(state)
    model, opt = state.model, state.optimizer
    lambdas = _effective_lambdas(state)
    model.train()
    terms = batch_losses(model, batch)
    values = [float(terms[k].detach()) for k in TERM_NAMES]
    for name, value in zip(TERM_NAMES, values):
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} ({value}) at step {state.step}")
    opt.zero_grad()
    # zero-weighted terms stay out of the graph, so parameters they alone feed get no update
    objective = combine([terms[k] for k, lam in zip(TERM_NAMES, lambdas) if lam != 0],
                        [lam for lam in lambdas if lam != 0])
    if isinstance(objective, torch.Tensor) and objective.requires_grad:
        objective.backward()
    opt.step()
    state.step += 1
    return state, total_loss(values, state.config.lambdas)


def _freeze_prompt_side(model: LeapdModel) -> None:
    """Second phase of the two-step baseline: prompts are fixed while the detector trains."""
    for name, p in model.named_parameters():
        if name.startswith(("prompt_bank", "text_encoder")):
            p.requires_grad_(False)


# -- training loop -----------------------------------------------------------


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _run_epoch(state: TrainState, dataset, log_file, epoch: int) -> list[LossBreakdown]:
    order = state.shuffle_rng.permutation(len(dataset))
    rows = []
    for idx in _batches(order, state.config.batch_size):
        batch = [dataset[int(i)] for i in idx]
        state, parts = train_step(state, batch)
        rows.append(parts)
        row = {"kind": "step", "step": state.step, "epoch": epoch, "phase": state.phase, **parts.as_row()}
        log_file.write(json.dumps(row) + "\n")
    return rows


def train(config: RunConfig, dataset, out_dir: str | Path, eval_dataset=None,
          state: TrainState | None = None) -> Path:
    """Run ``config.epochs`` epochs and write ``checkpoint.leapd`` and ``metrics.jsonl``.

    With ``config.two_step`` the prompt side is first fitted alone for
    ``stage1_epochs`` and then frozen while the detector trains.
    """
    from .evaluation import evaluate

    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    in_channels = dataset[0].image.shape[0]
    if state is None:
        state = init_state(config, dataset.categories, dataset.domains, in_channels)
    phases = [("joint", config.epochs)]
    if config.two_step and config.prompt_mode != "detector_only":
        phases = [("prompts", config.stage1_epochs), ("detector", config.epochs)]
    with open(out_dir / "metrics.jsonl", "w") as log_file:
        for phase, epochs in phases:
            state.phase = phase
            if phase == "detector":
                _freeze_prompt_side(state.model)
            for _ in range(epochs):
                rows = _run_epoch(state, dataset, log_file, state.epoch)
                row = {"kind": "epoch", "epoch": state.epoch, "phase": phase}
                for k in (*TERM_NAMES, "L_total"):
                    row[f"mean_{k}"] = float(np.mean([getattr(r, k) for r in rows]))
                if eval_dataset is not None and phase != "prompts":
                    report = evaluate(state.model.detector, eval_dataset, config.score_threshold,
                                      config.nms_iou, config.max_detections)
                    row.update(mAP50=report.mAP50, mAP75=report.mAP75, mAP50_95=report.mAP50_95)
                log_file.write(json.dumps(row) + "\n")
                log.info("epoch %d (%s): L_total %.4f", state.epoch, phase, row["mean_L_total"])
                state.epoch += 1
    path = out_dir / "checkpoint.leapd"
    save_checkpoint(state.model, path, epoch=state.epoch, step=state.step)
    return path


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


# -- checkpoints -------------------------------------------------------------


def _entries(model: LeapdModel) -> dict[str, torch.Tensor]:
    out = {}
    for name, tensor in model.state_dict().items():
        out["prompt_bank" if name == "prompt_bank.context" else name] = tensor
    return out


def write_checkpoint(path: str | Path, header: dict, entries: dict[str, torch.Tensor]) -> Path:
    """Magic, version, JSON header, then ``(name, shape, float64 LE data)`` entries."""
    path = Path(path)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        f.write(head)
        f.write(struct.pack("<Q", len(entries)))
        for name, tensor in entries.items():
            raw = name.encode()
            arr = tensor.detach().cpu().numpy().astype("<f8", copy=False)
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 20
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 1)
        pos += 1 + 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        entries[name] = torch.from_numpy(arr.copy())
    return header, entries


def save_checkpoint(model: LeapdModel, path: str | Path, **extra) -> Path:
    header = {"version": __version__, "config": dump_config(model.config),
              "categories": list(model.categories),
              "domains": [[d.altitude, d.view, d.weather, d.class_index] for d in model.domains],
              "in_channels": model.in_channels, "domain_modules": model.has_domain_modules, **extra}
    return write_checkpoint(path, header, _entries(model))


def load_checkpoint(path: str | Path) -> LeapdModel:
    header, entries = read_checkpoint(path)
    config = RunConfig(**parse_config_text(header["config"]))
    domains = [DomainLabel(a, v, w, i) for a, v, w, i in header["domains"]]
    if not any(k.startswith("detector.") for k in entries):
        raise ValueError(f"{path} holds no detector parameters")
    model = LeapdModel(config, header["categories"], domains, header["in_channels"],
                       with_domain_modules=header["domain_modules"])
    state = {("prompt_bank.context" if k == "prompt_bank" else k): v for k, v in entries.items()}
    model.load_state_dict(state, strict=True)
    return model


def strip_domain_modules(src: str | Path, dst: str | Path) -> Path:
    """Keep only the detector: the result is all that ``detect`` needs."""
    header, entries = read_checkpoint(src)
    kept = {k: v for k, v in entries.items() if k.startswith("detector.")}
    if not kept:
        raise ValueError(f"{src} holds no detector parameters")
    header = {**header, "domain_modules": False, "stripped": True}
    return write_checkpoint(dst, header, kept)
