"""End-to-end training and coarse-to-fine hierarchical sampling.

One parameter set serves every pyramid level. Each optimizer step draws,
per level: one timestep per batch element, one Gaussian noise field, and
one mask plan; the per-level noise-prediction losses and the
cross-granularity terms are summed into a single scalar before one Adam
update, so a failure at any level aborts the step with no parameter
change. Training is deterministic given (seed, config, dataset): every
random draw comes from one generator in a fixed order (levels iterate
coarsest to finest).

Sampling reverses the pyramid: the coarsest level denoises pure noise
conditioned on the downsampled source alone; each finer level is
additionally conditioned on the upsampled previous reconstruction and
resumes a shortened chain (``refine_fraction`` of the budget) from a
noised copy of it, refining inherited structure instead of regenerating
the level from scratch.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .cgr import GranularityLossReport, KernelSpec, cgr_loss
from .data import PairedSample, load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig, init_params, predict_noise
from .diffusion import (
    DiffusionStepInput,
    loss_eps,
    make_schedule,
    p_sample,
    q_sample,
    respace,
)
from .errors import (
    CheckpointCorruptionError,
    ConfigurationError,
    ContractError,
    NumericFailure,
)
from .masking import (
    TokenBatch,
    full_mask_plan,
    level_mask_ratio,
    patchify,
    sample_mask,
    unpatchify,
)
from .metrics import MetricReport, psnr, ssim
from .pyramid import Pyramid, decompose, upsample
from .tensor import AdamState, Tape, Tensor, adam_step, backward, reshape

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on; hashed for resume guards."""

    image_size: int = 64
    num_levels: int = 3
    alpha: float = 0.5
    patch_size: int = 8
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mask_ratio_fine: float = 0.75
    mask_ratio_coarse: float = 0.25
    refine_fraction: float = 0.1
    cgr_weight: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 10
    epochs: int = 4
    seed: int = 0
    checkpoint_every: int = 1
    embed_dim: int = 64
    num_heads: int = 4
    num_encoder_blocks: int = 2
    num_decoder_blocks: int = 4
    time_embed_dim: int = 64
    mlp_ratio: int = 4
    encode_clean_visible: bool = False

    def __post_init__(self):
        if self.image_size < self.patch_size or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} must be a positive multiple of "
                f"patch_size {self.patch_size}"
            )
        if self.num_levels < 1:
            raise ConfigurationError(f"num_levels must be >= 1, got {self.num_levels}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.cgr_weight < 0:
            raise ConfigurationError(
                f"cgr_weight must be >= 0, got {self.cgr_weight}"
            )
        if not 0.0 < self.refine_fraction <= 1.0:
            raise ConfigurationError(
                f"refine_fraction must lie in (0, 1], got {self.refine_fraction}"
            )
        if self.learning_rate <= 0:
            raise ConfigurationError(
                f"learning_rate must be > 0, got {self.learning_rate}"
            )
        for name in ("batch_size", "checkpoint_every", "timesteps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.epochs < 0 or self.seed < 0:
            raise ConfigurationError("epochs and seed must be >= 0")
        try:
            # bounds of the per-level ratio schedule (raises on bad ranges)
            level_mask_ratio(
                0, self.num_levels, self.mask_ratio_fine, self.mask_ratio_coarse
            )
        except ContractError as exc:
            raise ConfigurationError(str(exc)) from None

    def denoiser_config(self) -> DenoiserConfig:
        g = self.image_size // self.patch_size
        return DenoiserConfig(
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            num_encoder_blocks=self.num_encoder_blocks,
            num_decoder_blocks=self.num_decoder_blocks,
            patch_size=self.patch_size,
            channels=1,
            finest_grid=(g, g),
            time_embed_dim=self.time_embed_dim,
            mlp_ratio=self.mlp_ratio,
            num_levels=self.num_levels,
            encode_clean_visible=self.encode_clean_visible,
        )


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def build_pyramid(image: Array, config: TrainConfig) -> Pyramid:
    """Target/source hierarchy for a config; one level is a valid pyramid."""
    image = np.asarray(image, dtype=np.float64)
    if config.num_levels == 1:
        h, w = image.shape
        if h % config.patch_size or w % config.patch_size:
            raise ConfigurationError(
                f"dims {h}x{w} are not divisible by patch size {config.patch_size}"
            )
        return Pyramid(levels=(image.copy(),), alpha=config.alpha)
    return decompose(image, config.alpha, config.num_levels, config.patch_size)


@dataclass(frozen=True)
class TrainStepResult:
    epoch: int
    step: int
    loss_eps: float
    cgr_per_level: tuple[float, ...]  # coarsest granularity first
    combined: float

    def row(self) -> list[float]:
        return [
            float(self.epoch),
            float(self.step),
            self.loss_eps,
            *self.cgr_per_level,
            self.combined,
        ]


@dataclass(frozen=True)
class SampleTrace:
    """Per-level reconstructions, finest first, plus chain bookkeeping."""

    outputs: tuple[Array, ...]
    timestep_counts: tuple[int, ...]
    rng_seed: int | None
    snapshots: tuple[tuple[int, int, Array], ...] = ()  # (level, t, image)


@dataclass(frozen=True)
class EvalResult:
    """Finest-level metrics plus the per-level refinement curve per image.

    Each per_level_psnr row scores every level's output against the
    full-resolution target (coarser outputs bilinearly upsampled first),
    ordered coarsest to finest.
    """

    report: MetricReport
    per_level_psnr: tuple[tuple[float, ...], ...]  # [image][coarsest..finest]


def _tokens_for(images: Array, patch_size: int) -> TokenBatch:
    return patchify(np.asarray(images, dtype=np.float64)[:, None, :, :], patch_size)


def _images_from_tokens(tokens: Array, grid: tuple[int, int], patch_size: int) -> Array:
    batch = TokenBatch(
        tokens=np.asarray(tokens, dtype=np.float64),
        patch_size=patch_size,
        grid=grid,
        channels=1,
    )
    return unpatchify(batch)[:, 0]


class Trainer:
    """Owns parameters, optimizer state, rng, and the loss history.

    Batches are drawn by per-epoch permutation; a trailing partial batch
    is dropped so every optimizer step sees identical shapes.
    """

    def __init__(self, config: TrainConfig, train_samples: list[PairedSample]):
        self.config = config
        self.dconfig = config.denoiser_config()
        self.schedule = make_schedule(
            config.timesteps, config.beta_start, config.beta_end
        )
        self.kernel = KernelSpec()
        self._build_stores(train_samples)
        self._validate_masking()
        self.rng = np.random.default_rng(config.seed)
        self.params = init_params(self.dconfig, self.rng)
        self.adam = AdamState.for_params(self.params, config.learning_rate)
        self.epoch = 0
        self.global_step = 0
        self.history: list[list[float]] = []

    # ---- construction helpers ----

    def _build_stores(self, samples: list[PairedSample]) -> None:
        cfg = self.config
        if not samples:
            raise ConfigurationError("training split is empty")
        if len(samples) < cfg.batch_size:
            raise ConfigurationError(
                f"batch_size {cfg.batch_size} exceeds the {len(samples)}-sample "
                "training split"
            )
        expected = (cfg.image_size, cfg.image_size)
        for s in samples:
            if s.source.shape != expected:
                raise ConfigurationError(
                    f"sample {s.index} dims {s.source.shape} do not match "
                    f"configured image_size {cfg.image_size}"
                )
        target_pyrs = [build_pyramid(s.target, cfg) for s in samples]
        source_pyrs = [build_pyramid(s.source, cfg) for s in samples]

        self.num_samples = len(samples)
        self.grids: list[tuple[int, int]] = []
        self.target_tokens: list[Array] = []
        self.source_tokens: list[Array] = []
        self.coarse_tokens: list[Array | None] = []
        for n in range(cfg.num_levels):
            targets = np.stack([p.levels[n] for p in target_pyrs])
            sources = np.stack([p.levels[n] for p in source_pyrs])
            tb = _tokens_for(targets, cfg.patch_size)
            self.grids.append(tb.grid)
            self.target_tokens.append(tb.tokens)
            self.source_tokens.append(_tokens_for(sources, cfg.patch_size).tokens)
            if n + 1 < cfg.num_levels:
                # teacher forcing: the conditioning channel during training
                # is the clean coarser target, upsampled to this level
                out_dims = target_pyrs[0].levels[n].shape
                guides = np.stack(
                    [
                        upsample(p.levels[n + 1], 1.0 / cfg.alpha, out_dims=out_dims)
                        for p in target_pyrs
                    ]
                )
                self.coarse_tokens.append(_tokens_for(guides, cfg.patch_size).tokens)
            else:
                self.coarse_tokens.append(None)

    def _validate_masking(self) -> None:
        cfg = self.config
        self.ratios: list[float] = []
        for n in range(cfg.num_levels):
            ratio = level_mask_ratio(
                n, cfg.num_levels, cfg.mask_ratio_fine, cfg.mask_ratio_coarse
            )
            n_tokens = self.grids[n][0] * self.grids[n][1]
            n_masked = n_tokens if ratio == 0.0 else int(np.floor(ratio * n_tokens))
            if n_masked < 1:
                raise ConfigurationError(
                    f"mask ratio {ratio:.3f} at level {n} masks zero of "
                    f"{n_tokens} tokens"
                )
            if cfg.cgr_weight > 0 and cfg.num_levels >= 2:
                if cfg.batch_size * n_masked < 2:
                    raise ConfigurationError(
                        f"cross-granularity loss at level {n} needs >= 2 noise "
                        f"samples per step, got batch {cfg.batch_size} x "
                        f"{n_masked} masked tokens"
                    )
            self.ratios.append(ratio)

    # ---- training ----

    def train_step(self, indices: Array) -> TrainStepResult:
        cfg = self.config
        num_levels = cfg.num_levels
        step_no = self.global_step + 1
        batch = np.asarray(indices, dtype=np.int64)

        # all rng consumption happens up front in a fixed order, so the
        # forward/backward work cannot perturb resume determinism
        draws = []
        for n in range(num_levels - 1, -1, -1):
            n_tokens = self.grids[n][0] * self.grids[n][1]
            t = self.rng.integers(1, cfg.timesteps + 1, size=batch.size)
            eps = self.rng.standard_normal(
                (batch.size, n_tokens, self.dconfig.token_dim)
            )
            plan = (
                full_mask_plan(n_tokens)
                if self.ratios[n] == 0.0
                else sample_mask(n_tokens, self.ratios[n], self.rng)
            )
            draws.append((n, t, eps, plan))

        try:
            with Tape() as tape:
                loss_eps_total: Tensor | None = None
                cgr_hat: list[Tensor] = []
                cgr_true: list[Array] = []
                for n, t, eps, plan in draws:
                    x0 = self.target_tokens[n][batch]
                    x_t = q_sample(x0, t, eps, self.schedule)
                    visible = visible_positions = None
                    if plan.n_visible:
                        basis = x0 if cfg.encode_clean_visible else x_t
                        visible = basis[:, plan.visible_idx]
                        visible_positions = plan.visible_idx
                    coarse = self.coarse_tokens[n]
                    step = DiffusionStepInput(
                        x_masked=x_t[:, plan.masked_idx],
                        t=t,
                        masked_positions=plan.masked_idx,
                        source=self.source_tokens[n][batch],
                        grid=self.grids[n],
                        level=n,
                        num_levels=num_levels,
                        visible=visible,
                        visible_positions=visible_positions,
                        coarse=None if coarse is None else coarse[batch],
                    )
                    eps_hat = predict_noise(step, self.params, self.dconfig)
                    term = loss_eps(eps, eps_hat, plan)
                    if not np.isfinite(term.item()):
                        raise NumericFailure(
                            f"non-finite noise-prediction loss "
                            f"(level {n}, step {step_no})"
                        )
                    loss_eps_total = (
                        term if loss_eps_total is None else loss_eps_total + term
                    )
                    if cfg.cgr_weight > 0 and num_levels >= 2:
                        flat = (batch.size * plan.n_masked, self.dconfig.token_dim)
                        cgr_hat.append(reshape(eps_hat, flat))
                        cgr_true.append(eps[:, plan.masked_idx].reshape(flat))
                if cgr_hat:
                    report = cgr_loss(cgr_hat, cgr_true, self.kernel, cfg.cgr_weight)
                else:
                    report = GranularityLossReport(
                        per_level=(0.0,) * num_levels,
                        weight=cfg.cgr_weight,
                        combined=Tensor(0.0),
                    )
                combined = loss_eps_total + report.combined
            combined_value = combined.item()
            if not np.isfinite(combined_value):
                raise NumericFailure(f"non-finite combined loss (step {step_no})")
            backward(combined, tape)
            adam_step(self.params, self.adam)
            for name, p in self.params.items():
                if not np.all(np.isfinite(p.data)):
                    raise NumericFailure(
                        f"non-finite parameter {name!r} after update "
                        f"(step {step_no})"
                    )
        except Exception:
            # atomic step: never leave stale gradients for the next one
            for p in self.params.values():
                p.zero_grad()
            raise

        self.global_step = step_no
        result = TrainStepResult(
            epoch=self.epoch,
            step=step_no,
            loss_eps=loss_eps_total.item(),
            cgr_per_level=report.per_level,
            combined=combined_value,
        )
        self.history.append(result.row())
        return result

    def train_epoch(self) -> list[TrainStepResult]:
        cfg = self.config
        self.epoch += 1
        perm = self.rng.permutation(self.num_samples)
        results = []
        for b in range(self.num_samples // cfg.batch_size):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            results.append(self.train_step(idx))
        return results

    def train(self, epochs: int | None = None) -> list[list[float]]:
        for _ in range(self.config.epochs if epochs is None else epochs):
            self.train_epoch()
        return self.history

    # ---- persistence ----

    def save(self, path) -> None:
        header = {
            "config": asdict(self.config),
            "config_hash": config_hash(self.config),
            "epoch": self.epoch,
            "step": self.global_step,
            "rng_state": self.rng.bit_generator.state,
            "adam": {
                "learning_rate": self.adam.learning_rate,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "epsilon": self.adam.epsilon,
                "step_count": self.adam.step_count,
            },
            "loss_history": self.history,
            "extra_arrays": {
                **{f"adam.m.{k}": self.adam.m[k] for k in self.params},
                **{f"adam.v.{k}": self.adam.v[k] for k in self.params},
            },
        }
        save_checkpoint(path, self.params, header)

    @classmethod
    def resume(
        cls,
        path,
        train_samples: list[PairedSample],
        config: TrainConfig | None = None,
    ) -> "Trainer":
        """Rebuild a trainer mid-run; passing config overrides the stored one."""
        header, arrays, extras = load_checkpoint(path)
        stored = TrainConfig(**header["config"])
        trainer = cls(config or stored, train_samples)
        if set(arrays) != set(trainer.params):
            raise CheckpointCorruptionError(
                f"{path}: checkpoint parameters do not match the model "
                f"({len(arrays)} stored vs {len(trainer.params)} expected)"
            )
        for name, arr in arrays.items():
            if arr.shape != trainer.params[name].data.shape:
                raise CheckpointCorruptionError(
                    f"{path}: parameter {name!r} shape {arr.shape} does not "
                    f"match model shape {trainer.params[name].data.shape}"
                )
            trainer.params[name] = Tensor(arr, requires_grad=True)
        meta = header["adam"]
        trainer.adam = AdamState(
            learning_rate=meta["learning_rate"],
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            epsilon=meta["epsilon"],
            step_count=meta["step_count"],
        )
        for name in trainer.params:
            m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
            if m_key not in extras or v_key not in extras:
                raise CheckpointCorruptionError(
                    f"{path}: optimizer moments missing for {name!r}"
                )
            trainer.adam.m[name] = extras[m_key]
            trainer.adam.v[name] = extras[v_key]
        trainer.rng.bit_generator.state = header["rng_state"]
        trainer.epoch = header["epoch"]
        trainer.global_step = header["step"]
        trainer.history = [list(map(float, row)) for row in header["loss_history"]]
        return trainer


# ---- sampling ----


def _sample_chain_batch(
    sources: Array,
    params: dict[str, Tensor],
    config: TrainConfig,
    rng: np.random.Generator,
    num_timesteps: int,
    snapshot_every: int = 0,
) -> tuple[list[Array], list[int], list[tuple[int, int, Array]]]:
    """Reverse chains for a stack of source images, coarsest level first.

    A budget below the trained schedule length subsamples it: chain
    position k steps the respaced schedule while the denoiser is
    conditioned on the native timestep that position reuses.

    Returns per-level image stacks and chain lengths ordered finest
    first, plus optional (level, t, image-stack) snapshots.
    """
    dconfig = config.denoiser_config()
    native = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    sched, model_t = respace(native, num_timesteps)
    num_levels = config.num_levels
    pyrs = [build_pyramid(im, config) for im in np.asarray(sources, dtype=np.float64)]
    outputs: dict[int, Array] = {}
    level_steps: dict[int, int] = {}
    snapshots: list[tuple[int, int, Array]] = []
    coarse_images: Array | None = None
    for n in range(num_levels - 1, -1, -1):
        level_sources = np.stack([p.levels[n] for p in pyrs])
        tb = _tokens_for(level_sources, config.patch_size)
        coarse = (
            None
            if coarse_images is None
            else _tokens_for(coarse_images, config.patch_size).tokens
        )
        n_tokens = tb.grid[0] * tb.grid[1]
        positions = np.arange(n_tokens, dtype=np.int64)
        if coarse is None:
            # coarsest level: the full reverse chain from pure noise
            steps = sched.timesteps
            x = rng.standard_normal((len(pyrs), n_tokens, dconfig.token_dim))
        else:
            # finer levels refine the previous reconstruction: resume the
            # chain from its noised upsampled tokens instead of pure
            # noise, so inherited low frequencies survive and the short
            # chain only regenerates detail
            steps = max(1, round(config.refine_fraction * sched.timesteps))
            x = q_sample(
                coarse,
                np.full(len(pyrs), steps, dtype=np.int64),
                rng.standard_normal(coarse.shape),
                sched,
            )
        level_steps[n] = steps
        model_column = np.empty(len(pyrs), dtype=np.int64)
        pos_column = np.empty(len(pyrs), dtype=np.int64)
        for pos in range(steps, 0, -1):
            model_column[:] = model_t[pos - 1]
            pos_column[:] = pos
            step = DiffusionStepInput(
                x_masked=x,
                t=model_column,
                masked_positions=positions,
                source=tb.tokens,
                grid=tb.grid,
                level=n,
                num_levels=num_levels,
                coarse=coarse,
            )
            eps_hat = predict_noise(step, params, dconfig)
            # An imperfect predictor lets the chain drift without bound
            # (the 1/sqrt(a_t) gain compounds), so the implied clean-image
            # estimate is clipped to the data range and the prediction is
            # re-derived from it before the ancestral step.
            ab = sched.alpha_bar[pos - 1]
            x0_hat = np.clip(
                (x - math.sqrt(1.0 - ab) * eps_hat.data) / math.sqrt(ab),
                -1.0,
                1.0,
            )
            eps_eff = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
            x = p_sample(replace(step, t=pos_column), eps_eff, sched, rng)
            if snapshot_every and (pos % snapshot_every == 0 or pos == 1):
                snap = np.clip(
                    _images_from_tokens(x, tb.grid, config.patch_size), -1.0, 1.0
                )
                snapshots.append((n, int(model_t[pos - 2]) if pos > 1 else 0, snap))
        images = np.clip(
            _images_from_tokens(x, tb.grid, config.patch_size), -1.0, 1.0
        )
        outputs[n] = images
        if n > 0:
            out_dims = pyrs[0].levels[n - 1].shape
            coarse_images = np.stack(
                [upsample(im, 1.0 / config.alpha, out_dims=out_dims) for im in images]
            )
    return (
        [outputs[n] for n in range(num_levels)],
        [level_steps[n] for n in range(num_levels)],
        snapshots,
    )


def sample_hierarchical(
    source: Array,
    params: dict[str, Tensor],
    config: TrainConfig,
    rng: np.random.Generator | int,
    num_timesteps: int | None = None,
    snapshot_every: int = 0,
) -> SampleTrace:
    """Coarse-to-fine reconstruction of one source image."""
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    generator = np.random.default_rng(seed) if seed is not None else rng
    budget = config.timesteps if num_timesteps is None else num_timesteps
    outputs, counts, snaps = _sample_chain_batch(
        np.asarray(source)[None], params, config, generator, budget, snapshot_every
    )
    return SampleTrace(
        outputs=tuple(level[0] for level in outputs),
        timestep_counts=tuple(counts),
        rng_seed=seed,
        snapshots=tuple((n, t, stack[0]) for n, t, stack in snaps),
    )


# ---- evaluation ----


def evaluate(
    samples: list[PairedSample],
    params: dict[str, Tensor],
    config: TrainConfig,
    seed: int = 0,
    num_timesteps: int | None = None,
) -> EvalResult:
    """Sample every split member (one shared batched chain) and score it."""
    if not samples:
        raise ContractError("evaluation split is empty")
    budget = config.timesteps if num_timesteps is None else num_timesteps
    sources = np.stack([s.source for s in samples])
    outputs, _, _ = _sample_chain_batch(
        sources, params, config, np.random.default_rng(seed), budget
    )

    finest = outputs[0]
    psnr_values = [psnr(s.target, finest[i]) for i, s in enumerate(samples)]
    ssim_values = [ssim(s.target, finest[i]) for i, s in enumerate(samples)]
    # Each level is scored against the full-resolution target, with coarser
    # outputs upsampled to target dims first: the coarse reconstruction is a
    # blurred approximation and each finer level should add detail, so the
    # row reads as a progressive-refinement curve.
    full_dims = samples[0].target.shape
    per_level = []
    for i, s in enumerate(samples):
        row = []
        for n in range(config.num_levels - 1, -1, -1):
            out = outputs[n][i]
            if n > 0:
                out = np.clip(
                    upsample(out, (1.0 / config.alpha) ** n, out_dims=full_dims),
                    -1.0,
                    1.0,
                )
            row.append(psnr(s.target, out))
        per_level.append(tuple(row))
    per_level = tuple(per_level)
    return EvalResult(
        report=MetricReport.from_values(psnr_values, ssim_values),
        per_level_psnr=per_level,
    )


def copy_source_report(samples: list[PairedSample]) -> MetricReport:
    """Reference point: score the raw source against the target."""
    if not samples:
        raise ContractError("evaluation split is empty")
    return MetricReport.from_values(
        [psnr(s.target, s.source) for s in samples],
        [ssim(s.target, s.source) for s in samples],
    )
