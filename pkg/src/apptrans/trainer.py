"""The full optimization loop: alternating discriminator/generator Adam updates
with the flat-then-linear-decay schedule, epoch-wise pair refreshing,
line-delimited metrics, and deterministic checkpoint/resume.

Determinism contract: everything stochastic inside an epoch is drawn from RNGs
derived from (config seed, epoch, sample index), never from a stream that
crosses epoch boundaries. A checkpoint therefore replays bit-exactly: model
and optimizer state are restored and every subsequent draw re-derives.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn

from . import losses
from .adaptive_conv import apply_filter
from .datamodel import (
    ConfigError,
    DatasetRecord,
    HyperParams,
    TrainingAbort,
    ValidationError,
    load_image,
    load_manifest,
)
from .backbone import BackboneConfig
from .networks import (
    ContentEncoder,
    ModelConfig,
    TranslationModel,
    config_text_hash,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .pairing import PairAssignment, mine_positives, refresh_source_target, sample_nce_negatives
from .seeding import derive_seed


@dataclass
class TrainConfig:
    """Hyperparameters plus run geometry; flattens to the key=value config file."""

    hp: HyperParams = field(default_factory=HyperParams)
    image_size: int = 64
    content_channels: int = 64
    embed_dim: int = 128
    filter_hidden: int = 128
    k_candidates: int = 20
    seed: int = 0
    checkpoint_interval: int = 10
    out_dir: str = "runs/default"
    backbone_channels: int = 64
    backbone_seed: int = 7
    backbone_weights: Optional[str] = None
    ablate_translation: bool = False

    @property
    def total_epochs(self) -> int:
        return self.hp.epochs_flat + self.hp.epochs_decay

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            content_channels=self.content_channels,
            embed_dim=self.embed_dim,
            filter_kernel=self.hp.filter_k,
            filter_hidden=self.filter_hidden,
            backbone=BackboneConfig(
                channels=self.backbone_channels,
                seed=self.backbone_seed,
                weights_path=self.backbone_weights,
            ),
        )

    def to_canonical_text(self) -> str:
        """Flat sorted key=value lines; hashed into every checkpoint.

        out_dir is excluded: it is run plumbing, not training semantics, and a
        resume into a fresh directory must still hash-match its checkpoint.
        """
        items: dict[str, object] = {}
        for f in fields(HyperParams):
            items[f.name] = getattr(self.hp, f.name)
        for f in fields(TrainConfig):
            if f.name not in ("hp", "out_dir"):
                items[f.name] = getattr(self, f.name)
        return "\n".join(f"{k}={items[k]}" for k in sorted(items)) + "\n"

    def config_hash(self) -> str:
        return config_text_hash(self.to_canonical_text())

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        """Build from flat string key=value pairs (config file / CLI overrides)."""
        hp_fields = {f.name: f for f in fields(HyperParams)}
        own_fields = {f.name: f for f in fields(cls) if f.name != "hp"}
        hp_kwargs: dict = {}
        own_kwargs: dict = {}
        for key, raw in mapping.items():
            if key in hp_fields:
                hp_kwargs[key] = _parse_value(raw, hp_fields[key].type, key)
            elif key in own_fields:
                own_kwargs[key] = _parse_value(raw, own_fields[key].type, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(hp=HyperParams(**hp_kwargs), **own_kwargs)


def _parse_value(raw: str, annotation, key: str):
    text = str(raw).strip()
    ann = str(annotation)
    if "bool" in ann:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean for {key!r}: {raw!r}")
    if "int" in ann:
        return int(text)
    if "float" in ann:
        return float(text)
    if text.lower() == "none":
        return None
    return text


def parse_config_file(path: str | Path) -> dict[str, str]:
    """KEY=VALUE lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {line_no} is not KEY=VALUE: {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# initialization and schedule


def init_params(config: TrainConfig) -> TranslationModel:
    """Fresh model with every trainable conv/linear weight ~ N(0, init_std^2)
    from the seeded generator, zero biases, and the GeM exponent at 3."""
    model = TranslationModel(config.model_config())
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name in model.COLLECTIONS:
            for m in model.collection(name).modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * config.hp.init_std)
                    if m.bias is not None:
                        m.bias.zero_()
        model.head.gem.p.fill_(3.0)
    return model


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Flat for epochs_flat epochs, then linear decay: the k-th decay epoch
    runs at lr * (1 - k / epochs_decay)."""
    hp = config.hp
    if not 0 <= epoch < config.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < hp.epochs_flat:
        return hp.lr
    k = epoch - hp.epochs_flat + 1
    return hp.lr * (1.0 - k / hp.epochs_decay)


def make_optimizers(model: TranslationModel, config: TrainConfig):
    hp = config.hp
    opt_d = torch.optim.Adam(model.discriminator_side_parameters(),
                             lr=hp.lr, betas=(hp.adam_beta1, hp.adam_beta2))
    opt_g = torch.optim.Adam(model.generator_side_parameters(),
                             lr=hp.lr, betas=(hp.adam_beta1, hp.adam_beta2))
    return opt_d, opt_g


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# dataset in memory


@dataclass
class LoadedDataset:
    records: list[DatasetRecord]
    images: list[torch.Tensor]
    root: Path

    @classmethod
    def open(cls, manifest_path: str | Path) -> "LoadedDataset":
        records = load_manifest(manifest_path)
        root = Path(manifest_path).parent
        images = [load_image(root / r.image_path, ContentEncoder.stride) for r in records]
        return cls(records=records, images=images, root=root)

    def __len__(self) -> int:
        return len(self.records)


def content_key(image_path: str) -> str:
    """Scene identity: the filename stem before the trailing _domain suffix.
    Paths without the convention fall back to the full stem (every record
    then counts as distinct content)."""
    return Path(image_path).stem.rsplit("_", 1)[0]


@dataclass
class TrainBatch:
    source: torch.Tensor
    target: torch.Tensor
    target_pos: torch.Tensor
    source_neg: torch.Tensor
    target_neg: torch.Tensor
    nce_negatives: torch.Tensor  # (n_neg, 3, H, W)
    source_idx: int
    target_idx: int
    mined_pos: Optional[torch.Tensor] = None  # pose-mined positive (reference sources)


@dataclass
class EpochPlan:
    assignments: list[PairAssignment]
    positive_sets: dict[int, tuple[int, ...]]
    negative_sets: dict[int, tuple[int, ...]] = field(default_factory=dict)


@torch.no_grad()
def compute_embeddings(model: TranslationModel, images: Sequence[torch.Tensor],
                       chunk: int = 16) -> torch.Tensor:
    """Embed all images with the current model (content pathway), batched."""
    outs = []
    for start in range(0, len(images), chunk):
        batch = torch.stack(list(images[start:start + chunk]))
        outs.append(model.embed(model.encode_content(batch)))
    return torch.cat(outs) if outs else torch.zeros((0, model.config.embed_dim))


def prepare_epoch(model: TranslationModel, dataset: LoadedDataset,
                  config: TrainConfig) -> EpochPlan:
    """Epoch-boundary refresh: recompute embeddings, reassign source-target
    pairs, and mine pose positives among the reference records."""
    emb = compute_embeddings(model, dataset.images)
    assignments = refresh_source_target(dataset.records, emb)
    ref_idx = [i for i, r in enumerate(dataset.records) if r.is_reference]
    positive_sets: dict[int, tuple[int, ...]] = {}
    negative_sets: dict[int, tuple[int, ...]] = {}
    if len(ref_idx) >= 2:
        mined = mine_positives(
            [dataset.records[i] for i in ref_idx], emb[ref_idx],
            k_candidates=config.k_candidates,
            rot_thresh_deg=config.hp.rot_thresh_deg,
            trans_thresh_m=config.hp.trans_thresh_m)
        for local_q, result in enumerate(mined):
            positive_sets[ref_idx[local_q]] = tuple(ref_idx[j] for j in result.positives)
            negative_sets[ref_idx[local_q]] = tuple(ref_idx[j] for j in result.negatives)
    return EpochPlan(assignments=assignments, positive_sets=positive_sets,
                     negative_sets=negative_sets)


def assemble_batch(dataset: LoadedDataset, assignment: PairAssignment,
                   plan: EpochPlan, config: TrainConfig, epoch: int,
                   epoch_rng: random.Random) -> TrainBatch:
    records = dataset.records
    s, t = assignment.source_idx, assignment.target_idx
    t_domain = records[t].domain.name
    s_key = content_key(records[s].image_path)

    same_domain = [j for j in range(len(records)) if j != t and records[j].domain.name == t_domain]
    t_plus = epoch_rng.choice(same_domain) if same_domain else t

    diff_content = [j for j in range(len(records)) if content_key(records[j].image_path) != s_key]
    if not diff_content:
        diff_content = [j for j in range(len(records)) if j != s]
    s_minus = epoch_rng.choice(diff_content)

    diff_domain = [j for j in range(len(records)) if records[j].domain.name != t_domain]
    t_minus = epoch_rng.choice(diff_domain)

    # reference queries take up to half their NCE negatives from the mined
    # pose-far candidates (embedding-similar but far away: hard negatives);
    # the remainder is sampled uniformly as usual
    neg_seed = derive_seed(config.seed, "nce", epoch, s)
    exclude = plan.positive_sets.get(s, ())
    hard = list(plan.negative_sets.get(s, ()))[:config.hp.n_neg // 2]
    n_random = config.hp.n_neg - len(hard)
    random_negs = sample_nce_negatives(s, records, n_random, neg_seed,
                                       exclude=tuple(exclude) + tuple(hard))
    neg_idx = hard + random_negs

    # reference queries with pose-mined positives also contrast against one of
    # them (pose-near references are positive pairs, per the mining protocol)
    mined_pos = None
    if exclude:
        mined_pos = dataset.images[epoch_rng.choice(list(exclude))]

    return TrainBatch(
        source=dataset.images[s], target=dataset.images[t],
        target_pos=dataset.images[t_plus], source_neg=dataset.images[s_minus],
        target_neg=dataset.images[t_minus],
        nce_negatives=torch.stack([dataset.images[j] for j in neg_idx]),
        source_idx=s, target_idx=t, mined_pos=mined_pos,
    )


# ---------------------------------------------------------------------------
# the two half-steps

GRAD_CLIP_NORM = 1e3  # generous guard: cosine terms can emit 1/norm-scaled
                      # gradients near init that would overflow float32 Adam state


def _clip_grads(optimizer) -> None:
    params = [p for group in optimizer.param_groups for p in group["params"]]
    torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)


def discriminator_step(model: TranslationModel, batch: TrainBatch,
                       opt_d: torch.optim.Optimizer) -> dict[str, float]:
    """One Adam update of D_i and D_a on their adversarial objectives; the
    translated image is detached so no generator-side parameter moves."""
    with torch.no_grad():
        fake = model.translate(batch.source, batch.target)
    d_real_s = model.discriminate_image(batch.source)
    d_real_t = model.discriminate_image(batch.target)
    d_fake = model.discriminate_image(fake)
    adv_i_d, _ = losses.adv_image(d_real_s, d_real_t, d_fake)
    d_same = model.discriminate_appearance(batch.target, batch.target_pos)
    d_cross = model.discriminate_appearance(batch.target, fake)
    adv_a_d, _ = losses.adv_appearance(d_same, d_cross)
    loss_d = adv_i_d + adv_a_d
    if not torch.isfinite(loss_d):
        raise TrainingAbort("non-finite discriminator loss")
    opt_d.zero_grad()
    loss_d.backward()
    _clip_grads(opt_d)
    opt_d.step()
    return {
        "loss_d_image": float(adv_i_d.detach()),
        "loss_d_appearance": float(adv_a_d.detach()),
        "loss_d_total": float(loss_d.detach()),
    }


def generator_step(model: TranslationModel, batch: TrainBatch,
                   opt_g: torch.optim.Optimizer, hp: HyperParams) -> dict[str, float]:
    """One Adam update of E_c, E_a, G, H on the full generator-side objective."""
    f_s = model.encode_content(batch.source)
    w_t = model.generate_filter(batch.target)
    i_st = model.generate_image(apply_filter(f_s, w_t))

    w_s = model.generate_filter(batch.source)
    i_self = model.generate_image(apply_filter(f_s, w_s))

    f_st = model.encode_content(i_st)
    i_cyc = model.generate_image(apply_filter(f_st, w_s))

    f_neg = model.encode_content(batch.source_neg)
    w_st = model.generate_filter(i_st)
    w_t_neg = model.generate_filter(batch.target_neg)

    z_s = model.embed(f_s)
    z_st = model.embed(f_st)
    z_negs = model.embed(model.encode_content(batch.nce_negatives))
    nce_loss = losses.nce(z_s, z_st, z_negs, hp.tau)
    if batch.mined_pos is not None:
        z_mined = model.embed(model.encode_content(batch.mined_pos))
        nce_loss = 0.5 * (nce_loss + losses.nce(z_s, z_mined, z_negs, hp.tau))

    with torch.no_grad():
        d_real_s = model.discriminate_image(batch.source)
        d_real_t = model.discriminate_image(batch.target)
        d_same = model.discriminate_appearance(batch.target, batch.target_pos)
    d_fake = model.discriminate_image(i_st)
    _, adv_i_g = losses.adv_image(d_real_s, d_real_t, d_fake)
    d_cross = model.discriminate_appearance(batch.target, i_st)
    _, adv_a_g = losses.adv_appearance(d_same, d_cross)

    terms = losses.LossTerms(
        adv_image_g=adv_i_g,
        adv_appearance_g=adv_a_g,
        rec_self=losses.rec_self(i_self, batch.source),
        rec_cycle=losses.rec_cycle(i_cyc, batch.source),
        cons_content=losses.cons_content(f_s, f_st, f_neg, hp.m_c),
        cons_appearance=losses.cons_appearance(w_t, w_st, w_t_neg),
        nce=nce_loss,
    )
    agg = losses.total(terms, hp)
    opt_g.zero_grad()
    agg["generator"].backward()
    _clip_grads(opt_g)
    opt_g.step()
    return {
        "loss_g_image": float(adv_i_g.detach()),
        "loss_g_appearance": float(adv_a_g.detach()),
        "rec_self": float(terms.rec_self.detach()),
        "rec_cycle": float(terms.rec_cycle.detach()),
        "cons_content": float(terms.cons_content.detach()),
        "cons_appearance": float(terms.cons_appearance.detach()),
        "nce": float(terms.nce.detach()),
        "loss_g_total": float(agg["generator"].detach()),
    }


def color_jitter(image: torch.Tensor, rng: random.Random) -> torch.Tensor:
    """Random channel-wise affine recolor (the translation stand-in for the
    contrastive-only ablation)."""
    contrast = rng.uniform(0.6, 1.4)
    brightness = rng.uniform(-0.3, 0.3)
    tint = torch.tensor([rng.uniform(-0.2, 0.2) for _ in range(3)]).reshape(3, 1, 1)
    return (contrast * image + brightness + tint).clamp(-1.0, 1.0)


def contrastive_only_step(model: TranslationModel, batch: TrainBatch,
                          opt_g: torch.optim.Optimizer, hp: HyperParams,
                          rng: random.Random) -> dict[str, float]:
    """Ablation step (no translation module): the positive is a color-jittered
    source and only the NCE term trains."""
    jittered = color_jitter(batch.source, rng)
    z_s = model.embed(model.encode_content(batch.source))
    z_pos = model.embed(model.encode_content(jittered))
    z_negs = model.embed(model.encode_content(batch.nce_negatives))
    l_nce = losses.nce(z_s, z_pos, z_negs, hp.tau)
    loss = hp.beta_nce * l_nce
    if not torch.isfinite(loss):
        raise TrainingAbort("non-finite loss component: nce")
    opt_g.zero_grad()
    loss.backward()
    _clip_grads(opt_g)
    opt_g.step()
    zero = {k: 0.0 for k in ("loss_d_image", "loss_d_appearance", "loss_d_total",
                             "loss_g_image", "loss_g_appearance", "rec_self",
                             "rec_cycle", "cons_content", "cons_appearance")}
    zero.update({"nce": float(l_nce.detach()), "loss_g_total": float(loss.detach())})
    return zero


def _check_finite_params(model: TranslationModel) -> None:
    for coll, params in model.parameter_collections().items():
        for name, p in params:
            if not torch.isfinite(p).all():
                raise TrainingAbort(f"non-finite parameter after step: {coll}.{name}")


def train_step(model: TranslationModel, batch: TrainBatch,
               opt_d: torch.optim.Optimizer, opt_g: torch.optim.Optimizer,
               config: TrainConfig,
               step_rng: random.Random | None = None) -> dict[str, float]:
    """One discriminator update followed by one generator-side update."""
    if config.ablate_translation:
        metrics = contrastive_only_step(model, batch, opt_g, config.hp,
                                        step_rng or random.Random(0))
    else:
        metrics = discriminator_step(model, batch, opt_d)
        metrics.update(generator_step(model, batch, opt_g, config.hp))
    _check_finite_params(model)
    return metrics


# ---------------------------------------------------------------------------
# the fit loop


def _checkpoint_payload(config: TrainConfig):
    text = config.to_canonical_text()
    return text, config_text_hash(text)


def save_training_checkpoint(path: Path, model: TranslationModel, opt_d, opt_g,
                             epoch: int, step: int, config: TrainConfig) -> None:
    text, digest = _checkpoint_payload(config)
    save_checkpoint(path, model, opt_d_state=opt_d.state_dict(),
                    opt_g_state=opt_g.state_dict(), epoch=epoch, step=step,
                    config_text=text, config_hash=digest)


def fit(manifest_path: str | Path, config: TrainConfig,
        resume_from: str | Path | None = None,
        log_every: int = 0) -> Path:
    """Run the epoch loop (refresh pairs, iterate assignments, checkpoint) and
    return the final checkpoint path."""
    dataset = LoadedDataset.open(manifest_path)
    domains = {r.domain.name for r in dataset.records}
    if len(domains) < 2:
        raise ValidationError(f"training needs >= 2 domains, manifest has {len(domains)}")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text, config_digest = _checkpoint_payload(config)
    (out_dir / "config.txt").write_text(config_text)

    torch.manual_seed(config.seed)
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt["config_hash"] != config_digest:
            raise ConfigError("checkpoint config hash does not match the given config")
        model = model_from_checkpoint(ckpt)
        opt_d, opt_g = make_optimizers(model, config)
        opt_d.load_state_dict(ckpt["opt_d"])
        opt_g.load_state_dict(ckpt["opt_g"])
        start_epoch = ckpt["epoch"] + 1
        step = ckpt["step"]
        metrics_mode = "a"
    else:
        model = init_params(config)
        opt_d, opt_g = make_optimizers(model, config)
        start_epoch = 0
        step = 0
        metrics_mode = "w"

    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "checkpoint_final.pt"
    with metrics_path.open(metrics_mode) as metrics_file:
        for epoch in range(start_epoch, config.total_epochs):
            lr = lr_at(epoch, config)
            _set_lr(opt_d, lr)
            _set_lr(opt_g, lr)
            plan = prepare_epoch(model, dataset, config)
            epoch_rng = random.Random(derive_seed(config.seed, "epoch", epoch))
            for assignment in plan.assignments:
                batch = assemble_batch(dataset, assignment, plan, config, epoch, epoch_rng)
                metrics = train_step(model, batch, opt_d, opt_g, config, step_rng=epoch_rng)
                metrics.update({"step": step, "epoch": epoch, "lr": lr})
                metrics_file.write(json.dumps(metrics, sort_keys=True) + "\n")
                step += 1
                if log_every and step % log_every == 0:
                    print(f"step {step} epoch {epoch} "
                          f"g={metrics.get('loss_g_total', 0.0):.4f} "
                          f"d={metrics.get('loss_d_total', 0.0):.4f} "
                          f"rec={metrics.get('rec_self', 0.0):.4f}", flush=True)
            if (epoch + 1) % config.checkpoint_interval == 0 or epoch == config.total_epochs - 1:
                ckpt_path = out_dir / f"checkpoint_epoch{epoch:04d}.pt"
                save_training_checkpoint(ckpt_path, model, opt_d, opt_g, epoch, step, config)
    save_training_checkpoint(final_path, model, opt_d, opt_g,
                             config.total_epochs - 1, step, config)
    return final_path


def restore(checkpoint_path: str | Path) -> tuple[TranslationModel, dict]:
    """Load a checkpoint into a fresh model; returns (model, raw payload)."""
    ckpt = load_checkpoint(checkpoint_path)
    return model_from_checkpoint(ckpt), ckpt


@torch.no_grad()
def self_reconstruction_loss(model: TranslationModel, images: Sequence[torch.Tensor]) -> float:
    """Mean self-reconstruction L1 over a held-out set (the fidelity metric)."""
    total = 0.0
    for img in images:
        f = model.encode_content(img)
        w = model.generate_filter(img)
        recon = model.generate_image(apply_filter(f, w))
        total += float(losses.rec_self(recon, img))
    return total / max(len(images), 1)
