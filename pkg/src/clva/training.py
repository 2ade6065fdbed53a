"""Training orchestration: the per-pair adversarial phase, the cross-pair
contrastive phase, the epoch loop with checkpointing, and the optional
supervised warm-up.

Each epoch runs the adversarial phase first and the contrastive phase
second. Three Adam instances carry separate moment state: generator-side
networks at lr_g, the discriminator at lr_d, and the same generator-side
networks again at lr_crt for the contrastive phase.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import imageops, losses
from .checkpoint import CheckpointBundle, OptimizerGroupState, load_checkpoint, save_checkpoint
from .data import ContentImage, ContrastiveBatch, LvaBatch, StyleRecord, patch_boxes, sample_contrastive_batch, sample_lva_batch
from .losses import CrLossReport, LvaLossReport
from .models import CLVAModel, ModelConfig, init_model

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    """A loss turned non-finite; the step was aborted before any update."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    lr_g: float = 3e-4
    lr_d: float = 1e-4
    lr_crt: float = 3e-5
    lva_steps_per_epoch: int = 100
    cr_steps_per_epoch: int = 25
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    patches_per_image: int = 8
    patch_fraction: float = 1.0 / 8.0
    grad_clip: float = 5.0
    nonsaturating: bool = False
    warmup: str | None = None
    warmup_steps: int = 0
    warmup_lr: float | None = None  # defaults to lr_g
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if min(self.lr_g, self.lr_d, self.lr_crt) <= 0:
            raise ValueError("learning rates must be > 0")
        if min(self.lva_steps_per_epoch, self.cr_steps_per_epoch) < 0 or self.epochs < 0:
            raise ValueError("step counts and epochs must be >= 0")
        if self.batch_size < 1 or self.patches_per_image < 1:
            raise ValueError("batch_size and patches_per_image must be >= 1")
        self.model.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known) - {"serve"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=model, **known)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply `key=value` strings onto a config; keys must already exist.
    Model fields are addressed as `model.<field>`."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        target, leaf = d, key
        if key.startswith("model."):
            target, leaf = d["model"], key[len("model.") :]
        if leaf not in target:
            raise ValueError(f"unknown config key {key!r}")
        old = target[leaf]
        if isinstance(old, bool):
            target[leaf] = raw.lower() in ("1", "true", "yes")
        elif isinstance(old, int):
            target[leaf] = int(raw)
        elif isinstance(old, float):
            target[leaf] = float(raw)
        else:
            target[leaf] = raw
    return TrainConfig.from_dict(d)


# -- optimizer plumbing ----------------------------------------------------


def param_groups(model: CLVAModel) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Named parameters per optimizer group. The contrastive group aliases
    the generator-side parameters but keeps its own moment state."""
    gen = [(n, p) for n, p in model.named_parameters() if not n.startswith("discriminator.")]
    disc = [(n, p) for n, p in model.named_parameters() if n.startswith("discriminator.")]
    return {"gen": gen, "disc": disc, "crt": list(gen)}


def build_optimizers(model: CLVAModel, config: TrainConfig) -> dict[str, torch.optim.Adam]:
    groups = param_groups(model)
    lrs = {"gen": config.lr_g, "disc": config.lr_d, "crt": config.lr_crt}
    return {
        name: torch.optim.Adam(
            [p for _, p in groups[name]], lr=lrs[name], betas=ADAM_BETAS, eps=ADAM_EPS
        )
        for name in groups
    }


def extract_optimizer_state(
    opt: torch.optim.Adam, named: list[tuple[str, nn.Parameter]]
) -> OptimizerGroupState:
    st = OptimizerGroupState()
    for name, p in named:
        s = opt.state.get(p)
        if not s:
            continue
        st.steps[name] = float(s["step"])
        st.exp_avg[name] = s["exp_avg"].detach().cpu().numpy().copy()
        st.exp_avg_sq[name] = s["exp_avg_sq"].detach().cpu().numpy().copy()
    return st


def restore_optimizer_state(
    opt: torch.optim.Adam, named: list[tuple[str, nn.Parameter]], group: OptimizerGroupState
) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, (name, p) in enumerate(named):
        if name not in group.steps:
            continue
        state[idx] = {
            "step": torch.tensor(group.steps[name]),
            "exp_avg": torch.from_numpy(group.exp_avg[name]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(group.exp_avg_sq[name]).to(p.dtype),
        }
    sd["state"] = state
    opt.load_state_dict(sd)


def _clip_and_step(opt: torch.optim.Adam, named, max_norm: float) -> None:
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_([p for _, p in named], max_norm)
    opt.step()


def _require_finite(phase: str, parts: dict[str, torch.Tensor]) -> None:
    bad = {k: float(v.detach()) for k, v in parts.items() if not torch.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"{phase} step aborted", bad)


# -- training steps ----------------------------------------------------------


def _stack_patches(images: torch.Tensor, boxes_per_item: list[list[tuple[int, int, int, int]]]) -> torch.Tensor:
    patches = []
    for i, boxes in enumerate(boxes_per_item):
        for (t, l, ph, pw) in boxes:
            patches.append(images[i : i + 1, :, t : t + ph, l : l + pw])
    return torch.cat(patches, dim=0)


def lva_step(
    model: CLVAModel,
    optimizers: dict[str, torch.optim.Adam],
    batch: LvaBatch,
    config: TrainConfig,
    rng: np.random.Generator,
) -> LvaLossReport:
    """One adversarial step: reconstruct, transfer, judge patches, update
    the generator-side networks, then the discriminator."""
    groups = param_groups(model)
    k = config.patches_per_image
    contents = imageops.batch_to_tensor([c.pixels for c in batch.contents], model.dtype)
    style_imgs = imageops.batch_to_tensor([s.image for s in batch.styles], model.dtype)
    texts = [s.instruction for s in batch.styles]

    content_map, content_style = model.encode(contents)
    recon = model.generate(content_map, content_style)
    rec = losses.reconstruction_loss(recon, contents)

    instr = model.embed_text(texts)
    out = model.generate(content_map, instr)

    fake_boxes = [
        patch_boxes(out.shape[2], out.shape[3], config.patch_fraction, k, rng)
        for _ in range(out.shape[0])
    ]
    real_boxes = [
        patch_boxes(style_imgs.shape[2], style_imgs.shape[3], config.patch_fraction, k, rng)
        for _ in range(style_imgs.shape[0])
    ]
    fake_patches = _stack_patches(out, fake_boxes)
    real_patches = _stack_patches(style_imgs, real_boxes)
    instr_rep = instr.repeat_interleave(k, dim=0)

    d_fake = model.judge_patches(fake_patches, instr_rep)
    psd = losses.patch_style_loss(d_fake, nonsaturating=config.nonsaturating)

    out_map, out_style = model.encode(out)
    _, ref_style = model.encode(style_imgs)
    cm, sm = losses.matching_losses(out_map, out_style, content_map, ref_style)

    g_total = losses.generator_total(rec, psd, cm, sm)
    _require_finite("lva/generator", {"rec": rec, "psd": psd, "cm": cm, "sm": sm})

    optimizers["gen"].zero_grad(set_to_none=True)
    g_total.backward()
    _clip_and_step(optimizers["gen"], groups["gen"], config.grad_clip)

    d_fake_d = model.judge_patches(fake_patches.detach(), instr_rep.detach())
    d_real = model.judge_patches(real_patches, instr_rep.detach())
    d_loss = losses.discriminator_loss(d_fake_d, d_real)
    _require_finite("lva/discriminator", {"d_loss": d_loss})

    optimizers["disc"].zero_grad(set_to_none=True)
    (-d_loss).backward()  # maximize
    _clip_and_step(optimizers["disc"], groups["disc"], config.grad_clip)

    rec_f, psd_f, cm_f, sm_f = (float(x.detach()) for x in (rec, psd, cm, sm))
    return LvaLossReport(
        rec=rec_f,
        psd=psd_f,
        cm=cm_f,
        sm=sm_f,
        g_total=rec_f + psd_f + cm_f + sm_f,
        d_loss=float(d_loss.detach()),
        clamped=losses.probs_were_clamped(d_fake.detach())
        or losses.probs_were_clamped(d_fake_d.detach())
        or losses.probs_were_clamped(d_real.detach()),
    )


def cr_step(
    model: CLVAModel,
    optimizers: dict[str, torch.optim.Adam],
    batch: ContrastiveBatch,
    config: TrainConfig,
) -> CrLossReport:
    """One contrastive step over the four cross results; the discriminator
    is untouched."""
    groups = param_groups(model)
    (c1, s1), (c2, s2) = batch.pair_a, batch.pair_b

    contents = imageops.batch_to_tensor([c1.pixels, c2.pixels], model.dtype)
    style_imgs = imageops.batch_to_tensor([s1.image, s2.image], model.dtype)
    content_maps, _ = model.encode(contents)
    _, ref_styles = model.encode(style_imgs)
    instr = model.embed_text([s1.instruction, s2.instruction])

    # results for (C1,X1), (C1,X2), (C2,X1), (C2,X2) in one batch
    maps4 = content_maps[[0, 0, 1, 1]]
    instr4 = instr[[0, 1, 0, 1]]
    results = model.generate(maps4, instr4)
    out_maps, out_styles = model.encode(results)

    feats = [(out_maps[i], out_styles[i]) for i in range(4)]
    c_content, c_style = losses.consistent_matching(feats[0], feats[1], feats[2], feats[3])
    r_style = losses.relative_matching(
        out_styles[0], out_styles[1], out_styles[2], out_styles[3], ref_styles[0], ref_styles[1]
    )
    crt = losses.contrastive_loss(c_content, c_style, r_style)
    _require_finite("cr", {"c_content": c_content, "c_style": c_style, "r_style": r_style})

    optimizers["crt"].zero_grad(set_to_none=True)
    crt.backward()
    _clip_and_step(optimizers["crt"], groups["crt"], config.grad_clip)

    cc_f, cs_f, rs_f = (float(x.detach()) for x in (c_content, c_style, r_style))
    return CrLossReport(c_content=cc_f, c_style=cs_f, r_style=rs_f, crt_total=cc_f + cs_f + rs_f)


# -- warm-up -----------------------------------------------------------------


def load_warmup_targets(directory: str | Path) -> list[tuple[ContentImage, str, np.ndarray]]:
    """Read externally produced stylization targets: `manifest.jsonl` lines
    of {content, caption, target} with image paths relative to the dir."""
    directory = Path(directory)
    triples = []
    with open(directory / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            content = imageops.load_image(directory / rec["content"])
            target = imageops.load_image(directory / rec["target"])
            triples.append(
                (ContentImage(pixels=content, source_id=Path(rec["content"]).stem), rec["caption"], target)
            )
    if not triples:
        raise TrainingError(f"no warm-up targets in {directory}")
    return triples


def warmup_pretrain(
    model: CLVAModel,
    target_pairs: list[tuple[ContentImage, str, np.ndarray]],
    steps: int,
    config: TrainConfig,
) -> CLVAModel:
    """Supervised pretraining: regress decode(content, instruction) onto
    precomputed stylization targets. Optional stage before the main loop;
    its optimizer state is transient."""
    if not target_pairs:
        raise TrainingError("empty warm-up target set")
    if steps == 0:
        return model
    groups = param_groups(model)
    lr = config.warmup_lr if config.warmup_lr is not None else config.lr_g
    opt = torch.optim.Adam([p for _, p in groups["gen"]], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    n = len(target_pairs)
    for step in range(steps):
        pick = [target_pairs[(step * config.batch_size + j) % n] for j in range(config.batch_size)]
        contents = imageops.batch_to_tensor([c.pixels for c, _, _ in pick], model.dtype)
        targets = imageops.batch_to_tensor([t for _, _, t in pick], model.dtype)
        cmap, _ = model.encode(contents)
        instr = model.embed_text([x for _, x, _ in pick])
        out = model.generate(cmap, instr)
        loss = losses.reconstruction_loss(out, targets)
        _require_finite("warmup", {"loss": loss})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip_and_step(opt, groups["gen"], config.grad_clip)
    return model


# -- epoch loop ---------------------------------------------------------------


def _optim_state(optimizers, groups) -> dict[str, OptimizerGroupState]:
    return {name: extract_optimizer_state(optimizers[name], groups[name]) for name in optimizers}


def fit(
    contents: list[ContentImage],
    styles: list[StyleRecord],
    config: TrainConfig,
    run_dir: str | Path,
    resume_from: str | Path | None = None,
) -> tuple[CLVAModel, list[Path]]:
    """Run the full schedule: per epoch, the adversarial phase then the
    contrastive phase; checkpoint at every epoch boundary (including the
    initial state), appending one JSON line per step to the training log.
    """
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    with open(run_dir / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)

    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        optimizers = build_optimizers(model, config)
        groups = param_groups(model)
        for name, opt in optimizers.items():
            if name in bundle.optim:
                restore_optimizer_state(opt, groups[name], bundle.optim[name])
        rng = bundle.rng
        start_epoch, global_step = bundle.epoch, bundle.step
        paths: list[Path] = []
    else:
        model = init_model(config.model, config.seed)
        if config.warmup:
            warmup_pretrain(model, load_warmup_targets(config.warmup), config.warmup_steps, config)
        optimizers = build_optimizers(model, config)
        groups = param_groups(model)
        rng = np.random.default_rng(config.seed)
        start_epoch, global_step = 0, 0
        p0 = ckpt_dir / "epoch_0000.ckpt"
        save_checkpoint(p0, model, _optim_state(optimizers, groups), 0, 0, rng)
        paths = [p0]

    model.train()
    log_path = run_dir / "train_log.jsonl"
    with open(log_path, "a", encoding="utf-8") as log_fh:

        def emit(phase: str, epoch: int, report) -> None:
            rec = {"step": global_step, "epoch": epoch, "phase": phase}
            rec.update(report.to_dict())
            rec["wall_time"] = time.time()
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

        for epoch in range(start_epoch + 1, config.epochs + 1):
            for _ in range(config.lva_steps_per_epoch):
                batch = sample_lva_batch(contents, styles, config.batch_size, rng)
                report = lva_step(model, optimizers, batch, config, rng)
                global_step += 1
                emit("lva", epoch, report)
            for _ in range(config.cr_steps_per_epoch):
                cbatch = sample_contrastive_batch(contents, styles, rng)
                creport = cr_step(model, optimizers, cbatch, config)
                global_step += 1
                emit("cr", epoch, creport)
            p = ckpt_dir / f"epoch_{epoch:04d}.ckpt"
            save_checkpoint(p, model, _optim_state(optimizers, groups), global_step, epoch, rng)
            paths.append(p)
    return model, paths
