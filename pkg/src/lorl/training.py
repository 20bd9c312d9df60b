"""Joint optimization: combined loss, three-stage schedule, curriculum,
learning-rate schedules, and resumable checkpoints."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .datagen import Dataset, vocabulary_for_family
from .encoding import SceneEncoding
from .executor import ConceptSpace, execute
from .perception import MONetModel, SlotAttentionModel, build_model, loss_monet, loss_slot
from .scene import QAExample


class StageError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model_tag: str = "slot-attention"
    family: str = "household"
    image_size: int = 64
    num_slots: int = 7
    latent_dim: int = 64
    concept_dim: int = 64
    alpha: float = 1.0
    beta: float = 0.1
    n1: int = 90
    n2: int = 20
    n3: int = 80
    batch_size: int = 64
    seed: int = 0
    beta_kl: float = 0.5
    grad_clip: float = 1.0
    early_stop_patience: int = 10
    curriculum_max_objects: int = 3
    sa_base_lr: float = 4e-4
    sa_warmup_steps: int = 10_000
    sa_decay_steps: int = 100_000
    monet_lr_stage1: float = 1e-2
    monet_lr_later: float = 1e-3
    language_lrs: tuple = (1e-3, 2e-4, 2e-5)
    language_lr_epochs: tuple = (20, 85)
    steps_per_epoch: int = 1  # set at runtime from the dataset

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if min(self.n1, self.n2, self.n3) < 0 or self.batch_size < 1:
            raise ValueError("invalid schedule or batch size")

    def to_file(self, path: str | Path):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def from_file(path: str | Path, overrides: Optional[dict] = None) -> "TrainConfig":
        values: dict = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        kwargs = {}
        for f in dataclasses.fields(TrainConfig):
            if f.name not in values:
                continue
            raw = values[f.name]
            if isinstance(raw, str):
                if f.type in ("int", int):
                    raw = int(raw)
                elif f.type in ("float", float):
                    raw = float(raw)
                elif f.type in ("tuple", tuple):
                    parts = [p for p in raw.split(",") if p]
                    raw = tuple(float(p) if "." in p or "e" in p else int(p) for p in parts)
            kwargs[f.name] = raw
        return TrainConfig(**kwargs)


@dataclass
class TrainState:
    model: torch.nn.Module
    space: ConceptSpace
    opt_perception: torch.optim.Optimizer
    opt_space: torch.optim.Optimizer
    generator: torch.Generator
    stage: int = 1
    epoch: int = 0  # epochs completed within the current stage
    global_step: int = 0  # perception optimization steps
    language_step: int = 0  # reasoning optimization steps (stages 2-3)


def build_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model_tag, cfg.image_size, cfg.num_slots, cfg.latent_dim)
    vocab = vocabulary_for_family(cfg.family)
    space = ConceptSpace(vocab, slot_dim=cfg.latent_dim, concept_dim=cfg.concept_dim)
    if cfg.model_tag == "monet":
        opt_p = torch.optim.RMSprop(model.parameters(), lr=cfg.monet_lr_stage1)
    else:
        opt_p = torch.optim.Adam(model.parameters(), lr=cfg.sa_base_lr)
    opt_s = torch.optim.Adam(space.parameters(), lr=cfg.monet_lr_later)
    generator = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model=model, space=space, opt_perception=opt_p,
                      opt_space=opt_s, generator=generator)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def perception_loss(
    model_tag: str, enc: SceneEncoding, kl_terms: Optional[Tensor],
    image: Tensor, beta_kl: float,
) -> Tensor:
    if model_tag == "monet":
        return loss_monet(enc, kl_terms, image, beta_kl)
    return loss_slot(enc, image)


def reasoning_loss(
    qa_batch: Sequence[QAExample], enc: SceneEncoding, space: ConceptSpace
) -> Tensor:
    """Mean cross-entropy of the executor's answer distribution against gold.

    Equal-terminated descriptions have gold answer True (the model maximizes
    the probability of the statement).
    """
    if not qa_batch:
        raise ValueError("empty QA batch")
    losses = []
    for qa in qa_batch:
        dist = execute(qa.program, enc, space)
        p = dist.prob_of(qa.answer).clamp_min(1e-12)
        losses.append(-torch.log(p))
    return torch.stack(losses).mean()


def total_loss(
    enc: SceneEncoding,
    kl_terms: Optional[Tensor],
    image: Tensor,
    qa_batch: Sequence[QAExample],
    space: ConceptSpace,
    cfg: TrainConfig,
) -> Tensor:
    """alpha * L_perception + beta * L_reasoning for one scene."""
    loss = cfg.alpha * perception_loss(cfg.model_tag, enc, kl_terms, image, cfg.beta_kl)
    if cfg.beta > 0 and qa_batch:
        loss = loss + cfg.beta * reasoning_loss(qa_batch, enc, space)
    return loss


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def lr_schedule(step: int, stage: int, model_tag: str, cfg: TrainConfig) -> float:
    """Learning rate for the perception model at a given step of a stage.

    Slot Attention: linear warmup to the base rate over the warmup window,
    then halved every decay window (steps count perception updates). On the
    household family, stages 2-3 switch to fixed rates by language epoch.
    MONet: fixed per stage.
    """
    if model_tag == "monet":
        return cfg.monet_lr_stage1 if stage == 1 else cfg.monet_lr_later
    if stage >= 2 and cfg.family == "household":
        epoch = step // max(1, cfg.steps_per_epoch)
        if epoch < cfg.language_lr_epochs[0]:
            return cfg.language_lrs[0]
        if epoch < cfg.language_lr_epochs[1]:
            return cfg.language_lrs[1]
        return cfg.language_lrs[2]
    if step < cfg.sa_warmup_steps:
        return cfg.sa_base_lr * step / cfg.sa_warmup_steps
    return cfg.sa_base_lr * 0.5 ** (step // cfg.sa_decay_steps)


def curriculum_filter(
    dataset: Dataset, stage: int, epoch: int, cfg: TrainConfig
) -> tuple[list[int], list[QAExample]]:
    """Scene indices and QA examples admitted at this point of training.

    Stage 1 is unfiltered. Stage 2 keeps scenes with few objects. Stage 3
    grows the admitted object count and program length linearly from the
    stage-2 limits to everything over the first half of its epochs.
    """
    n_objects = [len(r.objects) for r in dataset.records]
    lengths = [len(q.program) for q in dataset.questions]
    if stage == 1:
        return list(range(len(dataset.records))), list(dataset.questions)
    if stage == 2:
        max_obj = cfg.curriculum_max_objects
        max_len = max(lengths) if lengths else 0
    else:
        ramp_epochs = max(1, cfg.n3 // 2)
        ramp = min(1.0, epoch / ramp_epochs)
        lo_obj, hi_obj = cfg.curriculum_max_objects, max(n_objects)
        max_obj = int(round(lo_obj + ramp * (hi_obj - lo_obj)))
        lo_len, hi_len = (min(lengths), max(lengths)) if lengths else (0, 0)
        max_len = int(round(lo_len + ramp * (hi_len - lo_len)))
    scene_ids = {
        dataset.records[i].image_id
        for i in range(len(dataset.records))
        if n_objects[i] <= max_obj
    }
    scenes = [i for i, r in enumerate(dataset.records) if r.image_id in scene_ids]
    questions = [
        q for q in dataset.questions
        if q.scene_id in scene_ids and len(q.program) <= max_len
    ]
    if not scenes or not questions:
        raise DataError(f"curriculum filter left no data at stage {stage}, epoch {epoch}")
    return scenes, questions


# ---------------------------------------------------------------------------
# Encoding helpers
# ---------------------------------------------------------------------------

def encode_batch(
    model: torch.nn.Module, images: Tensor, generator=None
) -> tuple[list[SceneEncoding], Optional[Tensor]]:
    """(B, 3, H, W) -> per-scene encodings plus MONet KL terms (B, K) or None."""
    if isinstance(model, MONetModel):
        masks, z, rgb, kl, s = model.decompose(images, generator)
        encs = [
            SceneEncoding(z=z[b], x=rgb[b], m=masks[b], s=s[b], model_tag="monet")
            for b in range(images.shape[0])
        ]
        return encs, kl
    slots, rgb, masks, s = model(images, generator)
    encs = [
        SceneEncoding(z=slots[b], x=rgb[b], m=masks[b], s=s[b], model_tag="slot-attention")
        for b in range(images.shape[0])
    ]
    return encs, None


def load_images(dataset: Dataset, indices: Sequence[int]) -> Tensor:
    arrs = [dataset.image(i) for i in indices]
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------

def _set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _clip(params, max_norm: float):
    torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm)


def run_stage(
    stage: int,
    state: TrainState,
    dataset: Dataset,
    cfg: TrainConfig,
    log_path: Optional[Path] = None,
    epoch_callback=None,
) -> TrainState:
    """Run one training stage to completion (resumes mid-stage from state.epoch)."""
    if stage not in (1, 2, 3):
        raise StageError(f"invalid stage {stage}")
    if state.stage > stage:
        raise StageError(f"cannot regress from stage {state.stage} to {stage}")
    if state.stage < stage:
        state.stage = stage
        state.epoch = 0
    n_epochs = {1: cfg.n1, 2: cfg.n2, 3: cfg.n3}[stage]
    image_cache: dict[int, Tensor] = {}

    if stage == 2:
        state.model.requires_grad_(False)
    else:
        state.model.requires_grad_(True)

    best_qa, best_epoch = -1.0, -1
    while state.epoch < n_epochs:
        epoch = state.epoch
        scenes, questions = curriculum_filter(dataset, stage, epoch, cfg)
        epoch_rng = np.random.default_rng([cfg.seed, stage, epoch])
        stats = {"loss": 0.0, "n": 0, "qa_correct": 0, "qa_total": 0}
        if stage == 1:
            order = epoch_rng.permutation(scenes)
            cfg.steps_per_epoch = max(1, int(np.ceil(len(order) / cfg.batch_size)))
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size].tolist()
                _stage1_step(state, dataset, batch, cfg, image_cache, stats)
        else:
            order = epoch_rng.permutation(len(questions))
            cfg.steps_per_epoch = max(1, int(np.ceil(len(order) / cfg.batch_size)))
            for start in range(0, len(order), cfg.batch_size):
                batch = [questions[i] for i in order[start : start + cfg.batch_size]]
                _language_step(stage, state, dataset, batch, cfg, image_cache, stats)
        state.epoch += 1
        record = {
            "stage": stage,
            "epoch": epoch,
            "loss": stats["loss"] / max(1, stats["n"]),
            "qa_accuracy": (stats["qa_correct"] / stats["qa_total"]) if stats["qa_total"] else None,
            "global_step": state.global_step,
        }
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if epoch_callback is not None:
            epoch_callback(state, record)
        if stage == 3 and cfg.early_stop_patience > 0 and record["qa_accuracy"] is not None:
            if record["qa_accuracy"] > best_qa + 1e-6:
                best_qa, best_epoch = record["qa_accuracy"], epoch
            elif epoch - best_epoch >= cfg.early_stop_patience:
                break
    if stage == 2:
        state.model.requires_grad_(True)
    return state


def _cached_images(dataset, indices, cache) -> Tensor:
    missing = [i for i in indices if i not in cache]
    if missing:
        batch = load_images(dataset, missing)
        for j, i in enumerate(missing):
            cache[i] = batch[j]
    return torch.stack([cache[i] for i in indices])


def _stage1_step(state, dataset, scene_indices, cfg, cache, stats):
    images = _cached_images(dataset, scene_indices, cache)
    encs, kl = encode_batch(state.model, images, state.generator)
    losses = [
        perception_loss(cfg.model_tag, enc,
                        kl[b] if kl is not None else None,
                        images[b].permute(1, 2, 0), cfg.beta_kl)
        for b, enc in enumerate(encs)
    ]
    loss = cfg.alpha * torch.stack(losses).mean()
    lr = lr_schedule(state.global_step, 1, cfg.model_tag, cfg)
    _set_lr(state.opt_perception, lr)
    state.opt_perception.zero_grad()
    loss.backward()
    _clip(state.model.parameters(), cfg.grad_clip)
    state.opt_perception.step()
    state.global_step += 1
    stats["loss"] += float(loss.detach())
    stats["n"] += 1


def _language_step(stage, state, dataset, qa_batch, cfg, cache, stats):
    scene_index = dataset.scene_index
    scene_ids = sorted({qa.scene_id for qa in qa_batch})
    indices = [scene_index[sid] for sid in scene_ids]
    images = _cached_images(dataset, indices, cache)
    encs, kl = encode_batch(state.model, images, state.generator)
    by_scene = {sid: (encs[i], kl[i] if kl is not None else None) for i, sid in enumerate(scene_ids)}

    ce_terms = []
    for qa in qa_batch:
        enc, _ = by_scene[qa.scene_id]
        dist = execute(qa.program, enc, state.space)
        p = dist.prob_of(qa.answer).clamp_min(1e-12)
        ce_terms.append(-torch.log(p))
        stats["qa_correct"] += int(
            0 == _answer_mismatch(dist.argmax_answer, qa.answer)
        )
        stats["qa_total"] += 1
    loss = cfg.beta * torch.stack(ce_terms).mean()
    if stage == 3 and cfg.alpha > 0:
        recon = [
            perception_loss(cfg.model_tag, by_scene[sid][0], by_scene[sid][1],
                            images[i].permute(1, 2, 0), cfg.beta_kl)
            for i, sid in enumerate(scene_ids)
        ]
        loss = loss + cfg.alpha * torch.stack(recon).mean()

    lr = lr_schedule(state.language_step, stage, cfg.model_tag, cfg)
    _set_lr(state.opt_space, lr if cfg.model_tag != "monet" else cfg.monet_lr_later)
    _set_lr(state.opt_perception, lr)
    state.opt_space.zero_grad()
    state.opt_perception.zero_grad()
    loss.backward()
    _clip(list(state.model.parameters()) + list(state.space.parameters()), cfg.grad_clip)
    state.opt_space.step()
    if stage == 3:
        state.opt_perception.step()
        state.global_step += 1
    state.language_step += 1
    stats["loss"] += float(loss.detach())
    stats["n"] += 1


def _answer_mismatch(pred, gold) -> int:
    from .executor import answer_key

    return 0 if answer_key(pred) == answer_key(gold) else 1


def run_training(
    state: TrainState, dataset: Dataset, cfg: TrainConfig,
    log_path: Optional[Path] = None, checkpoint_dir: Optional[Path] = None,
) -> TrainState:
    """Run stages 1 -> 2 -> 3, checkpointing at each epoch boundary."""
    def callback(st, record):
        if checkpoint_dir is not None:
            save_checkpoint(st, cfg, checkpoint_dir)

    for stage in (1, 2, 3):
        if state.stage > stage or (state.stage == stage and
                                   state.epoch >= {1: cfg.n1, 2: cfg.n2, 3: cfg.n3}[stage]):
            continue
        run_stage(stage, state, dataset, cfg, log_path=log_path, epoch_callback=callback)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, cfg: TrainConfig, out_dir: str | Path):
    """Manifest plus one portable array file per named parameter."""
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    named = {}
    for name, p in state.model.state_dict().items():
        named[f"model.{name}"] = p
    for name, p in state.space.state_dict().items():
        named[f"space.{name}"] = p
    for name, p in named.items():
        np.save(out / "params" / f"{name}.npy", p.detach().cpu().numpy())
    manifest = {
        "model_tag": cfg.model_tag,
        "config": _config_json(cfg),
        "stage": state.stage,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "language_step": state.language_step,
        "parameters": sorted(named),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    torch.save(
        {
            "opt_perception": state.opt_perception.state_dict(),
            "opt_space": state.opt_space.state_dict(),
            "generator": state.generator.get_state(),
        },
        out / "optim.pt",
    )


def _config_json(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["language_lrs"] = list(cfg.language_lrs)
    d["language_lr_epochs"] = list(cfg.language_lr_epochs)
    return d


def load_checkpoint(ckpt_dir: str | Path) -> tuple[TrainState, TrainConfig]:
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    conf = dict(manifest["config"])
    conf["language_lrs"] = tuple(conf["language_lrs"])
    conf["language_lr_epochs"] = tuple(conf["language_lr_epochs"])
    cfg = TrainConfig(**conf)
    state = build_state(cfg)
    model_sd, space_sd = {}, {}
    for name in manifest["parameters"]:
        arr = np.load(ckpt / "params" / f"{name}.npy")
        scope, _, rest = name.partition(".")
        (model_sd if scope == "model" else space_sd)[rest] = torch.from_numpy(arr)
    state.model.load_state_dict(model_sd)
    state.space.load_state_dict(space_sd)
    optim = torch.load(ckpt / "optim.pt", weights_only=False)
    state.opt_perception.load_state_dict(optim["opt_perception"])
    state.opt_space.load_state_dict(optim["opt_space"])
    state.generator.set_state(optim["generator"])
    state.stage = manifest["stage"]
    state.epoch = manifest["epoch"]
    state.global_step = manifest["global_step"]
    state.language_step = manifest["language_step"]
    return state, cfg
