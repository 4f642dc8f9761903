"""Loss composition and the synchronized generator/discriminator trainer."""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass, field
from itertools import chain
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datamodel import (SampleRecord, WINDOW_FRAMES, group_frames,
                        window_sample)
from .decoder import build_transition_mask
from .discriminators import (StyleDiscriminator, SyncDiscriminator,
                             lsgan_disc_loss, lsgan_gen_loss)
from .duration import loss_dur, loss_pho
from .errors import (ConfigError, NonFiniteLoss, ShapeMismatch, TooShort)
from .expression_encoder import standardize_codes
from .model import (CONFIG_KEY, META_STEP_KEY, MODEL_PREFIX, ModelConfig,
                    SpeakStyleModel, model_arrays)
from .nn import (load_archive, load_state_arrays, pack_json, save_archive,
                 state_dict_arrays, unpack_json)

TRANSITION_GAP = 16


def loss_rec(target: torch.Tensor, predicted: torch.Tensor,
             reduction: str = "mean") -> torch.Tensor:
    """L1 reconstruction loss; "mean" normalizes by frame x channel count."""
    if target.shape != predicted.shape:
        raise ShapeMismatch(
            f"target {tuple(target.shape)} vs predicted "
            f"{tuple(predicted.shape)}")
    diff = torch.abs(target - predicted)
    return diff.mean() if reduction == "mean" else diff.sum()


def loss_vel(target: torch.Tensor, predicted: torch.Tensor,
             reduction: str = "mean") -> torch.Tensor:
    """L1 distance between frame-to-frame velocities."""
    if target.shape != predicted.shape:
        raise ShapeMismatch(
            f"target {tuple(target.shape)} vs predicted "
            f"{tuple(predicted.shape)}")
    if target.shape[-2] < 2:
        raise TooShort("velocity loss needs at least 2 frames")
    v_t = target.diff(dim=-2)
    v_p = predicted.diff(dim=-2)
    diff = torch.abs(v_t - v_p)
    return diff.mean() if reduction == "mean" else diff.sum()


def loss_total(components: dict[str, torch.Tensor],
               weights: dict[str, float] | None = None) -> torch.Tensor:
    """Weighted sum of named loss components (default weight 1.0 each)."""
    total = None
    for name, value in components.items():
        if not bool(torch.isfinite(value)):
            raise NonFiniteLoss(name)
        weight = 1.0 if weights is None else weights.get(name, 1.0)
        if weight == 0.0:
            continue
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return total


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    disc_lr: float = 1e-4
    lambda_rec: float = 1.0
    lambda_vel: float = 1.0
    lambda_spk: float = 1.0
    lambda_dur: float = 1.0
    lambda_adv: float = 1.0
    lambda_pho: float = 1.0
    lambda_cls: float = 1.0
    adv_warmup: int = 500
    curriculum_masked_ratio: float = 0.5
    classifier_refresh_steps: int = 8
    classifier_refresh_lr: float = 1e-2
    classifier_buffer_steps: int = 48
    log_every: int = 10
    checkpoint_every: int = 0
    use_discriminators: bool = True
    shift_min: int = 8
    shift_max: int = 16
    nan_injection_step: int = -1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.batch_size <= 0:
            raise ConfigError(
                f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.curriculum_masked_ratio <= 1.0:
            raise ConfigError(
                f"curriculum_masked_ratio must lie in [0, 1], got "
                f"{self.curriculum_masked_ratio}")
        if not 0 < self.shift_min <= self.shift_max < WINDOW_FRAMES:
            raise ConfigError(
                f"sync shift range [{self.shift_min}, {self.shift_max}] "
                f"invalid for {WINDOW_FRAMES}-frame windows")
        if self.classifier_refresh_steps < 0:
            raise ConfigError(
                f"classifier_refresh_steps must be non-negative, got "
                f"{self.classifier_refresh_steps}")
        if self.classifier_buffer_steps < 1:
            raise ConfigError(
                f"classifier_buffer_steps must be positive, got "
                f"{self.classifier_buffer_steps}")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        if "model" in data and isinstance(data["model"], dict):
            data["model"] = ModelConfig.from_dict(data["model"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    arrays: dict[str, np.ndarray] = {}
    meta = {"param_groups": sd["param_groups"], "scalars": {}}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                arrays[f"{prefix}{idx}/{key}"] = \
                    value.detach().cpu().numpy().astype(np.float32)
            else:
                meta["scalars"].setdefault(str(idx), {})[key] = value
    return arrays, meta


def _load_optimizer(opt: torch.optim.Optimizer, arrays: dict, meta: dict,
                    prefix: str) -> None:
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        if not name.startswith(prefix):
            continue
        idx_str, key = name[len(prefix):].split("/", 1)
        entry = state.setdefault(int(idx_str), {})
        tensor = torch.as_tensor(value)
        entry[key] = tensor.reshape(()) if key == "step" else tensor
    for idx_str, scalars in meta.get("scalars", {}).items():
        state.setdefault(int(idx_str), {}).update(scalars)
    opt.load_state_dict({"state": state,
                         "param_groups": meta["param_groups"]})


class Trainer:
    """Owns the generator, both discriminators, and their optimizers.

    Every step draws its batch and its dropout noise from seeds derived
    from (config.seed, step), so an interrupted run resumed from a
    checkpoint replays the remaining steps exactly.
    """

    STYLE_DISC_PREFIX = "disc_style/"
    SYNC_DISC_PREFIX = "disc_sync/"
    GEN_OPT_PREFIX = "optim_gen/"
    DISC_OPT_PREFIX = "optim_disc/"
    CLF_OPT_PREFIX = "optim_clf/"
    CLF_BUFFER_PREFIX = "clf_buffer/"

    def __init__(self, records: list[SampleRecord], config: TrainConfig,
                 out_dir, quiet: bool = True):
        if not records:
            raise ConfigError("empty training corpus")
        for record in records:
            if record.expression.num_frames < WINDOW_FRAMES:
                raise ConfigError(
                    f"training samples must span at least {WINDOW_FRAMES} "
                    f"expression frames")
            if record.identity_id < 0 or \
                    record.identity_id >= config.model.num_identities:
                raise ConfigError(
                    f"sample identity {record.identity_id} outside model's "
                    f"{config.model.num_identities} identities")
        self.records = records
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.quiet = quiet
        self.step = 0
        torch.manual_seed(config.seed)
        self.model = SpeakStyleModel(config.model)
        self.style_disc = StyleDiscriminator(
            num_identities=config.model.num_identities,
            model_dim=config.model.model_dim,
            embed_dim=config.model.style_dim)
        self.sync_disc = SyncDiscriminator(
            speech_dim=config.model.model_dim,
            model_dim=max(16, config.model.model_dim // 2))
        self.gen_opt = torch.optim.Adam(self.model.parameters(), lr=config.lr)
        self.disc_opt = torch.optim.Adam(
            chain(self.style_disc.parameters(), self.sync_disc.parameters()),
            lr=config.disc_lr)
        self.clf_opt = torch.optim.Adam(
            self.model.expression_encoder.classifier.parameters(),
            lr=config.classifier_refresh_lr)
        self._clf_buffer: deque = deque(maxlen=config.classifier_buffer_steps)
        self.log_path = self.out_dir / "train_log.jsonl"
        self._by_identity: dict[int, list[int]] = {}
        for i, record in enumerate(records):
            self._by_identity.setdefault(record.identity_id, []).append(i)

    # -- batch construction --------------------------------------------------

    def _plain_element(self, rng: np.random.Generator) -> dict:
        record = self.records[int(rng.integers(len(self.records)))]
        frames = record.expression.num_frames
        start = int(rng.integers(frames - WINDOW_FRAMES + 1))
        win = window_sample(record, start, WINDOW_FRAMES)
        return {
            "expr": torch.from_numpy(win.expression.frames.copy()),
            "speech": torch.from_numpy(win.speech.frames.copy()),
            "frame_labels": torch.from_numpy(
                win.alignment.frame_labels.copy()).long(),
            "durations": np.asarray(win.alignment.durations, dtype=np.int64),
            "identity": record.identity_id,
            "mask": None,
        }

    def _masked_element(self, rng: np.random.Generator) -> dict:
        identity = int(rng.choice(sorted(self._by_identity)))
        pool = self._by_identity[identity]
        first = self.records[int(rng.choice(pool))]
        emotions = [i for i in pool
                    if self.records[i].emotion_id != first.emotion_id]
        if not emotions:
            element = self._plain_element(rng)
            return element
        second = self.records[int(rng.choice(emotions))]
        boundary = int(rng.integers(12, 45))
        f_start = int(rng.integers(
            first.expression.num_frames - WINDOW_FRAMES + 1))
        s_start = int(rng.integers(
            second.expression.num_frames - WINDOW_FRAMES + 1))
        win_a = window_sample(first, f_start, WINDOW_FRAMES)
        win_b = window_sample(second, s_start, WINDOW_FRAMES)
        expr = np.concatenate([win_a.expression.frames[:boundary],
                               win_b.expression.frames[boundary:]])
        speech = np.concatenate([win_a.speech.frames[:4 * boundary],
                                 win_b.speech.frames[4 * boundary:]])
        labels = np.concatenate([win_a.alignment.frame_labels[:4 * boundary],
                                 win_b.alignment.frame_labels[4 * boundary:]])
        _, durations = group_frames(labels)
        mask = build_transition_mask(WINDOW_FRAMES,
                                     max(1, boundary - TRANSITION_GAP),
                                     boundary)
        return {
            "expr": torch.from_numpy(np.ascontiguousarray(expr)),
            "speech": torch.from_numpy(np.ascontiguousarray(speech)),
            "frame_labels": torch.from_numpy(labels.copy()).long(),
            "durations": np.asarray(durations, dtype=np.int64),
            "identity": identity,
            "mask": mask,
        }

    def _batch(self, rng: np.random.Generator) -> list[dict]:
        batch = []
        for _ in range(self.config.batch_size):
            masked = rng.random() < self.config.curriculum_masked_ratio
            batch.append(self._masked_element(rng) if masked
                         else self._plain_element(rng))
        return batch

    # -- steps ---------------------------------------------------------------

    def _adv_active(self) -> bool:
        return (self.config.use_discriminators
                and self.config.lambda_adv > 0.0
                and self.step >= self.config.adv_warmup)

    def _refresh_classifier(self, batch: list[dict]) -> None:
        """Fit the identity classifier on a replay buffer of recent codes.

        The shared generator optimizer takes one step per classifier update,
        which leaves the classifier far from optimal and lets the content
        trunk win the minimax game by drifting instead of by removing
        identity information.  Training the classifier to near-convergence
        on detached codes from the last few steps keeps the reversed
        gradient pointed at the actual identity signal.  Content codes are
        standardized per batch before buffering so entries from different
        steps stay comparable.
        """
        encoder = self.model.expression_encoder
        with torch.no_grad():
            expr = torch.stack([el["expr"] for el in batch])
            ids = torch.tensor([el["identity"] for el in batch])
            styles = self.model.encode_style(expr)
            content = standardize_codes(
                encoder.encode_content(expr).mean(dim=-2))
        self._clf_buffer.append((styles, content, ids))
        style_bank = torch.cat([entry[0] for entry in self._clf_buffer])
        content_bank = torch.cat([entry[1] for entry in self._clf_buffer])
        id_bank = torch.cat([entry[2] for entry in self._clf_buffer])
        for _ in range(self.config.classifier_refresh_steps):
            loss = encoder.loss_spk(encoder.classifier(style_bank), id_bank) \
                + encoder.loss_spk(encoder.classifier(content_bank), id_bank)
            self.clf_opt.zero_grad()
            loss.backward()
            self.clf_opt.step()

    def _generator_pass(self, batch: list[dict]):
        cfg = self.config
        outputs, h_w2vs = [], []
        rec_terms, vel_terms, pho_terms, dur_terms = [], [], [], []
        rec_sum = vel_sum = 0.0
        expr_stack = torch.stack([el["expr"] for el in batch])
        identities = torch.tensor([el["identity"] for el in batch])
        if cfg.model.use_style:
            styles = self.model.expression_encoder.encode_style(expr_stack)
        else:
            styles = None
        for i, el in enumerate(batch):
            style = None if styles is None else styles[i]
            y_hat, aux = self.model.generate(
                el["speech"], style, durations_speech=el["durations"],
                total_expr=WINDOW_FRAMES, mask=el["mask"],
                context_expressions=el["expr"] if el["mask"] is not None
                else None)
            outputs.append(y_hat)
            h_w2vs.append(aux["h_w2v"])
            if el["mask"] is not None:
                idx = torch.tensor(el["mask"].masked, dtype=torch.long)
                rec_terms.append(loss_rec(el["expr"][idx], y_hat[idx]))
                rec_sum += loss_rec(el["expr"][idx], y_hat[idx],
                                    reduction="sum").item()
            else:
                rec_terms.append(loss_rec(el["expr"], y_hat))
                rec_sum += loss_rec(el["expr"], y_hat,
                                    reduction="sum").item()
            vel_terms.append(loss_vel(el["expr"], y_hat))
            vel_sum += loss_vel(el["expr"], y_hat, reduction="sum").item()
            if cfg.model.use_duration:
                pho_terms.append(loss_pho(aux["phoneme_logits"],
                                          el["frame_labels"]))
                dur_terms.append(loss_dur(
                    aux["predicted_durations"],
                    torch.from_numpy(el["durations"])))
        components = {
            "rec": torch.stack(rec_terms).mean(),
            "vel": torch.stack(vel_terms).mean(),
        }
        weights = {"rec": cfg.lambda_rec, "vel": cfg.lambda_vel}
        if cfg.model.use_style:
            style_logits = self.model.expression_encoder.classify_identity(
                styles)
            spk = self.model.expression_encoder.loss_spk(style_logits,
                                                         identities)
            content = self.model.expression_encoder.encode_content(expr_stack)
            adv_content = self.model.expression_encoder \
                .adversarial_content_penalty(content, identities)
            components["spk"] = spk + adv_content
            weights["spk"] = cfg.lambda_spk
        if cfg.model.use_duration:
            components["dur"] = torch.stack(dur_terms).mean()
            components["pho"] = torch.stack(pho_terms).mean()
            weights["dur"] = cfg.lambda_dur
            weights["pho"] = cfg.lambda_dur * cfg.lambda_pho
        fake_stack = torch.stack(outputs)
        if self._adv_active():
            embed_fake = self.style_disc.embed(fake_stack)
            style_scores = self.style_disc.realness(embed_fake, identities)
            sync_means = []
            for i, el in enumerate(batch):
                _, mean_score = self.sync_disc(outputs[i],
                                               h_w2vs[i].detach())
                sync_means.append(mean_score)
            adv = lsgan_gen_loss(style_scores) \
                + lsgan_gen_loss(torch.stack(sync_means))
            cls = self.style_disc.loss_cls(embed_fake, identities)
            components["adv"] = adv
            components["cls"] = cls
            weights["adv"] = cfg.lambda_adv
            weights["cls"] = cfg.lambda_adv * cfg.lambda_cls
        extras = {"rec_sum": rec_sum, "vel_sum": vel_sum}
        return components, weights, fake_stack, h_w2vs, identities, extras

    def _discriminator_pass(self, batch: list[dict], fake_stack: torch.Tensor,
                            h_w2vs: list[torch.Tensor],
                            identities: torch.Tensor,
                            rng: np.random.Generator) -> torch.Tensor:
        cfg = self.config
        real_stack = torch.stack([el["expr"] for el in batch])
        embed_real = self.style_disc.embed(real_stack)
        embed_fake = self.style_disc.embed(fake_stack.detach())
        real_scores = self.style_disc.realness(embed_real, identities)
        fake_scores = self.style_disc.realness(embed_fake, identities)
        style_loss = lsgan_disc_loss(real_scores, fake_scores)
        cls_loss = self.style_disc.loss_cls(embed_real, identities)
        sync_real, sync_fake = [], []
        for i, el in enumerate(batch):
            hidden = h_w2vs[i].detach()
            _, real_mean = self.sync_disc(el["expr"], hidden)
            _, fake_mean = self.sync_disc(fake_stack[i].detach(), hidden)
            sync_real.append(real_mean)
            sync_fake.append(fake_mean)
            shift = int(rng.integers(cfg.shift_min, cfg.shift_max + 1))
            if rng.random() < 0.5:
                shift = -shift
            _, shifted_mean = self.sync_disc(
                torch.roll(el["expr"], shifts=shift, dims=0), hidden)
            sync_fake.append(shifted_mean)
        sync_loss = lsgan_disc_loss(torch.stack(sync_real),
                                    torch.stack(sync_fake))
        return style_loss + sync_loss + cfg.lambda_cls * cls_loss

    def train_step(self) -> dict:
        cfg = self.config
        torch.manual_seed((cfg.seed * 1_000_003 + self.step) % (2 ** 31))
        rng = np.random.default_rng([cfg.seed, self.step])
        batch = self._batch(rng)
        self.model.train()
        self.style_disc.train()
        self.sync_disc.train()
        if cfg.classifier_refresh_steps and cfg.model.use_style \
                and cfg.lambda_spk > 0.0:
            self._refresh_classifier(batch)

        components, weights, fake_stack, h_w2vs, identities, extras = \
            self._generator_pass(batch)
        if self.step == cfg.nan_injection_step:
            components["rec"] = components["rec"] * float("nan")
        total = loss_total(components, weights)
        self.gen_opt.zero_grad()
        self.disc_opt.zero_grad()
        total.backward()
        self.gen_opt.step()

        metrics = {"step": self.step,
                   "total": float(total.detach())}
        for name, value in components.items():
            metrics[name] = float(value.detach())
        metrics.update(extras)

        if cfg.use_discriminators:
            disc_loss = self._discriminator_pass(
                batch, fake_stack, h_w2vs, identities, rng)
            if not bool(torch.isfinite(disc_loss)):
                raise NonFiniteLoss("disc")
            self.disc_opt.zero_grad()
            self.gen_opt.zero_grad()
            disc_loss.backward()
            self.disc_opt.step()
            metrics["disc"] = float(disc_loss.detach())

        self.step += 1
        return metrics

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        arrays = model_arrays(self.model)
        arrays.update(state_dict_arrays(self.style_disc,
                                        self.STYLE_DISC_PREFIX))
        arrays.update(state_dict_arrays(self.sync_disc,
                                        self.SYNC_DISC_PREFIX))
        gen_arrays, gen_meta = _optimizer_arrays(self.gen_opt,
                                                 self.GEN_OPT_PREFIX)
        disc_arrays, disc_meta = _optimizer_arrays(self.disc_opt,
                                                   self.DISC_OPT_PREFIX)
        clf_arrays, clf_meta = _optimizer_arrays(self.clf_opt,
                                                 self.CLF_OPT_PREFIX)
        arrays.update(gen_arrays)
        arrays.update(disc_arrays)
        arrays.update(clf_arrays)
        if self._clf_buffer:
            arrays[self.CLF_BUFFER_PREFIX + "styles"] = np.stack(
                [entry[0].numpy() for entry in self._clf_buffer])
            arrays[self.CLF_BUFFER_PREFIX + "content"] = np.stack(
                [entry[1].numpy() for entry in self._clf_buffer])
            arrays[self.CLF_BUFFER_PREFIX + "ids"] = np.stack(
                [entry[2].numpy() for entry in self._clf_buffer])
        arrays["__config__/train"] = pack_json(self.config.to_dict())
        arrays["__config__/optim"] = pack_json(
            {"gen": gen_meta, "disc": disc_meta, "clf": clf_meta})
        arrays[META_STEP_KEY] = np.array([self.step], dtype=np.float32)
        save_archive(path, arrays)

    @classmethod
    def resume(cls, records: list[SampleRecord], checkpoint_path,
               out_dir, quiet: bool = True) -> "Trainer":
        arrays = load_archive(checkpoint_path)
        config = TrainConfig.from_dict(unpack_json(arrays["__config__/train"]))
        trainer = cls(records, config, out_dir, quiet=quiet)
        load_state_arrays(trainer.model, arrays, MODEL_PREFIX)
        load_state_arrays(trainer.style_disc, arrays, cls.STYLE_DISC_PREFIX)
        load_state_arrays(trainer.sync_disc, arrays, cls.SYNC_DISC_PREFIX)
        optim_meta = unpack_json(arrays["__config__/optim"])
        _load_optimizer(trainer.gen_opt, arrays, optim_meta["gen"],
                        cls.GEN_OPT_PREFIX)
        _load_optimizer(trainer.disc_opt, arrays, optim_meta["disc"],
                        cls.DISC_OPT_PREFIX)
        _load_optimizer(trainer.clf_opt, arrays, optim_meta["clf"],
                        cls.CLF_OPT_PREFIX)
        buffer_key = cls.CLF_BUFFER_PREFIX + "styles"
        if buffer_key in arrays:
            styles = torch.from_numpy(arrays[buffer_key])
            content = torch.from_numpy(
                arrays[cls.CLF_BUFFER_PREFIX + "content"])
            # the archive stores every array as float32
            ids = torch.from_numpy(
                arrays[cls.CLF_BUFFER_PREFIX + "ids"]).long()
            for k in range(styles.shape[0]):
                trainer._clf_buffer.append((styles[k], content[k], ids[k]))
        trainer.step = int(arrays[META_STEP_KEY][0])
        return trainer

    # -- loop ----------------------------------------------------------------

    def train(self) -> dict:
        cfg = self.config
        last_metrics: dict = {}
        with open(self.log_path, "a") as log:
            while self.step < cfg.steps:
                metrics = self.train_step()
                last_metrics = metrics
                if cfg.log_every and metrics["step"] % cfg.log_every == 0:
                    log.write(json.dumps(metrics, sort_keys=True) + "\n")
                    log.flush()
                    if not self.quiet:
                        print(json.dumps(metrics, sort_keys=True))
                if cfg.checkpoint_every and \
                        self.step % cfg.checkpoint_every == 0 and \
                        self.step < cfg.steps:
                    self.save_checkpoint(
                        self.out_dir / f"checkpoint_{self.step:06d}.ckpt")
        final = self.out_dir / "checkpoint_final.ckpt"
        self.save_checkpoint(final)
        return last_metrics
