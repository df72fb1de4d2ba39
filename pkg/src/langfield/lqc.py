"""Language Quantized Compressor: encoder + learnable codebook + decoder.

Maps C-dimensional dense language features to a D-channel discrete latent
via nearest-neighbor lookup in a trained codebook, and decodes back.
Training combines reconstruction, embedding-pull, and text-activation losses
with a straight-through gradient rule: the loss value is computed through
the quantized latent, while the encoder receives the gradient of a surrogate
in which the quantizer is replaced by identity at the same encoder output.
The codebook receives gradient only from the embedding-pull term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rawio
from .optim import Adam, TrainingDivergedError


@dataclass
class Codebook:
    """K learnable D-dimensional embeddings spanning the discrete latent space."""

    entries: np.ndarray  # (K, D)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def D(self) -> int:
        return self.entries.shape[1]

    def validate(self) -> None:
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ValueError(f"codebook must be a non-empty (K, D) matrix, got {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook contains non-finite entries")


Layer = tuple[np.ndarray, np.ndarray]   # (W (out, in), b (out,))


@dataclass
class LqcModel:
    """Per-pixel MLP encoder/decoder around a quantized codebook, plus loss weights."""

    encoder: list[Layer]
    decoder: list[Layer]
    codebook: Codebook
    lambdas: tuple[float, float, float] = (1.0, 0.2, 0.5)
    beta: float = 0.0    # optional commitment weight; 0 reproduces the three-term objective

    @property
    def C(self) -> int:
        return self.encoder[0][0].shape[1]

    @property
    def D(self) -> int:
        return self.encoder[-1][0].shape[0]

    def validate(self) -> None:
        for name, layers, cin, cout in (
            ("encoder", self.encoder, self.C, self.D),
            ("decoder", self.decoder, self.D, self.C),
        ):
            prev = cin
            for i, (W, b) in enumerate(layers):
                if W.shape[1] != prev or b.shape != (W.shape[0],):
                    raise ValueError(f"{name} layer {i}: shape {W.shape} does not chain from {prev}")
                prev = W.shape[0]
            if prev != cout:
                raise ValueError(f"{name}: output width {prev} != expected {cout}")
        self.codebook.validate()
        if self.codebook.D != self.D:
            raise ValueError(f"codebook width {self.codebook.D} != latent width {self.D}")
        if any(l < 0 for l in self.lambdas) or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TextBank:
    """Unit-normalized text embeddings used for activation-map supervision."""

    queries: np.ndarray  # (Q, C)

    def validate(self) -> None:
        if self.queries.ndim != 2 or self.queries.shape[0] < 1:
            raise ValueError(f"text bank must be a non-empty (Q, C) matrix, got {self.queries.shape}")
        norms = np.linalg.norm(self.queries.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("text bank rows must be unit-norm within 1e-4")


@dataclass
class LqcTrainConfig:
    channels: int = 512
    latent: int = 3
    hidden: int = 256
    codebook_size: int = 64          # 2048 at production scale; desk runs use less
    lambdas: tuple[float, float, float] = (1.0, 0.2, 0.5)
    beta: float = 0.0
    steps: int = 2000
    batch_pixels: int = 512
    lr: float = 1e-3
    dead_code_steps: int = 2000
    seed: int = 0
    log_every: int = 1
    extra: dict = field(default_factory=dict)


def new_lqc_model(config: LqcTrainConfig, seed: int | None = None) -> LqcModel:
    """He-initialized encoder/decoder; the codebook gets random entries that
    training replaces with encoder outputs from the first batch."""
    rng = np.random.default_rng(np.random.PCG64(config.seed if seed is None else seed))
    enc_sizes = [config.channels, config.hidden, config.latent] if config.hidden else [config.channels, config.latent]
    dec_sizes = [config.latent, config.hidden, config.channels] if config.hidden else [config.latent, config.channels]

    def make(sizes):
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            layers.append((W, np.zeros(fan_out)))
        return layers

    entries = rng.normal(0.0, 1.0, size=(config.codebook_size, config.latent))
    return LqcModel(
        encoder=make(enc_sizes),
        decoder=make(dec_sizes),
        codebook=Codebook(entries=entries),
        lambdas=config.lambdas,
        beta=config.beta,
    )


# ---------------------------------------------------------------------------
# forward operations (numpy in / numpy out; float64 math)

def _flatten(x: np.ndarray, channels: int, what: str) -> tuple[np.ndarray, tuple]:
    if x.shape[-1] != channels:
        raise ValueError(f"{what}: channel mismatch, input has {x.shape[-1]}, model expects {channels}")
    lead = x.shape[:-1]
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, channels), lead


def _mlp_np(layers: list[Layer], x: np.ndarray) -> np.ndarray:
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W.T.astype(np.float64) + b.astype(np.float64)
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def encode(model: LqcModel, x: np.ndarray) -> np.ndarray:
    """Apply the per-pixel encoder; (..., C) -> (..., D)."""
    flat, lead = _flatten(x, model.C, "encode")
    return _mlp_np(model.encoder, flat).reshape(*lead, model.D)


def decode(model: LqcModel, z: np.ndarray) -> np.ndarray:
    """Apply the per-pixel decoder; (..., D) -> (..., C)."""
    flat, lead = _flatten(z, model.D, "decode")
    return _mlp_np(model.decoder, flat).reshape(*lead, model.C)


def quantize(codebook: Codebook, z_e: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry per pixel (squared Euclidean, ties to the lowest index).

    Returns (z_q, indices) with z_q holding the selected entries.
    """
    codebook.validate()
    flat, lead = _flatten(z_e, codebook.D, "quantize")
    entries = codebook.entries.astype(np.float64)
    idx = np.empty(flat.shape[0], dtype=np.int64)
    # plain elementwise ops, chunked; the per-row difference order matches a
    # scalar exhaustive scan bit-for-bit in float64
    for s in range(0, flat.shape[0], chunk):
        d = flat[s:s + chunk, None, :] - entries[None, :, :]
        idx[s:s + chunk] = np.argmin(np.sum(d * d, axis=-1), axis=-1)
    z_q = entries[idx].reshape(*lead, codebook.D)
    return z_q, idx.reshape(lead)


# ---------------------------------------------------------------------------
# losses and gradients (torch engine, float64)

def _to_t(arr: np.ndarray, requires_grad=False) -> torch.Tensor:
    t = torch.as_tensor(np.ascontiguousarray(arr, dtype=np.float64))
    if requires_grad:
        t.requires_grad_(True)
    return t


def _mlp_t(layers, x, frozen: bool = False):
    h = x
    for i, (W, b) in enumerate(layers):
        Wt, bt = (W.detach(), b.detach()) if frozen else (W, b)
        h = h @ Wt.T + bt
        if i < len(layers) - 1:
            h = torch.relu(h)
    return h


def _nearest_t(entries: torch.Tensor, z: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    parts = []
    for s in range(0, z.shape[0], chunk):
        d = z[s:s + chunk, None, :] - entries[None, :, :]
        parts.append(torch.argmin((d * d).sum(-1), dim=-1))
    return torch.cat(parts)


def _loss_graph(enc_t, dec_t, entries_t, x_t, bank_t, lambdas, beta):
    """Builds loss values plus the gradient-assembly scalar implementing the
    straight-through rule (value through z_q, encoder gradient through z_e,
    codebook gradient only from the embedding-pull term)."""
    l1, l2, l3 = lambdas
    z_e = _mlp_t(enc_t, x_t)
    z_e_d = z_e.detach()
    idx = _nearest_t(entries_t.detach(), z_e_d)
    picked = entries_t[idx]

    x_hat = _mlp_t(dec_t, picked.detach())            # decoder path, value-carrying
    l_r = ((x_t - x_hat) ** 2).mean()
    act_gt = x_t @ bank_t.T
    l_mask = ((x_hat @ bank_t.T - act_gt) ** 2).mean()
    l_emb = ((z_e_d - picked) ** 2).sum(-1).mean()    # mean over pixels of squared L2

    x_hat_sur = _mlp_t(dec_t, z_e, frozen=True)       # quantizer-as-identity surrogate
    sur = l1 * ((x_t - x_hat_sur) ** 2).mean() + l3 * ((x_hat_sur @ bank_t.T - act_gt) ** 2).mean()

    total_val = l1 * l_r + l2 * l_emb + l3 * l_mask
    grad_scalar = l1 * l_r + l3 * l_mask + l2 * l_emb + sur
    if beta:
        commit = ((z_e - picked.detach()) ** 2).sum(-1).mean()
        total_val = total_val + beta * commit
        grad_scalar = grad_scalar + beta * commit
    return {"l_r": l_r, "l_emb": l_emb, "l_mask": l_mask, "total": total_val,
            "grad_scalar": grad_scalar, "indices": idx}


def _model_tensors(model: LqcModel, requires_grad=False):
    enc = [( _to_t(W, requires_grad), _to_t(b, requires_grad)) for W, b in model.encoder]
    dec = [( _to_t(W, requires_grad), _to_t(b, requires_grad)) for W, b in model.decoder]
    entries = _to_t(model.codebook.entries, requires_grad)
    return enc, dec, entries


def lqc_losses(model: LqcModel, x: np.ndarray, text_bank: TextBank):
    """Returns (L_r, L_emb, L_mask, L_lqc) as floats."""
    model.validate()
    text_bank.validate()
    if text_bank.queries.shape[1] != model.C:
        raise ValueError(f"text bank channels {text_bank.queries.shape[1]} != C {model.C}")
    flat, _ = _flatten(x, model.C, "lqc_losses")
    enc, dec, entries = _model_tensors(model)
    with torch.no_grad():
        out = _loss_graph(enc, dec, entries, _to_t(flat), _to_t(text_bank.queries), model.lambdas, model.beta)
    return (float(out["l_r"]), float(out["l_emb"]), float(out["l_mask"]), float(out["total"]))


@dataclass
class LqcGradients:
    encoder: list[Layer]
    decoder: list[Layer]
    codebook: np.ndarray


def lqc_backward(model: LqcModel, x: np.ndarray, text_bank: TextBank) -> LqcGradients:
    """Gradients of the training objective under the straight-through rule."""
    model.validate()
    text_bank.validate()
    flat, _ = _flatten(x, model.C, "lqc_backward")
    enc, dec, entries = _model_tensors(model, requires_grad=True)
    out = _loss_graph(enc, dec, entries, _to_t(flat), _to_t(text_bank.queries), model.lambdas, model.beta)
    out["grad_scalar"].backward()

    def grab(layers):
        return [(W.grad.numpy().copy() if W.grad is not None else np.zeros_like(W.detach().numpy()),
                 b.grad.numpy().copy() if b.grad is not None else np.zeros_like(b.detach().numpy()))
                for W, b in layers]

    cb = entries.grad.numpy().copy() if entries.grad is not None else np.zeros_like(model.codebook.entries)
    return LqcGradients(encoder=grab(enc), decoder=grab(dec), codebook=cb)


# ---------------------------------------------------------------------------
# training

def _prepare_dataset(dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    from .bundle import FeatureMap
    items = []
    for feats, bank in dataset:
        arr = feats.data if isinstance(feats, FeatureMap) else np.asarray(feats)
        arr = arr.reshape(-1, arr.shape[-1]).astype(np.float32)
        q = bank.queries if isinstance(bank, TextBank) else np.asarray(bank)
        items.append((arr, q.astype(np.float32)))
    if not items:
        raise ValueError("dataset is empty")
    return items


def _train_loop(dataset, config: LqcTrainConfig, quantized: bool):
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    items = _prepare_dataset(dataset)
    model = new_lqc_model(config)
    dt = torch.float32
    enc = [(torch.tensor(W, dtype=dt, requires_grad=True), torch.tensor(b, dtype=dt, requires_grad=True))
           for W, b in model.encoder]
    dec = [(torch.tensor(W, dtype=dt, requires_grad=True), torch.tensor(b, dtype=dt, requires_grad=True))
           for W, b in model.decoder]
    entries = torch.tensor(model.codebook.entries, dtype=dt, requires_grad=True)

    params = {}
    for i, (W, b) in enumerate(enc):
        params[f"enc.{i}.W"], params[f"enc.{i}.b"] = W, b
    for i, (W, b) in enumerate(dec):
        params[f"dec.{i}.W"], params[f"dec.{i}.b"] = W, b
    if quantized:
        params["codebook"] = entries
    opt = Adam(params, lrs=config.lr)

    def sample_batch():
        arr, bank = items[int(rng.integers(len(items)))]
        rows = rng.integers(0, arr.shape[0], size=min(config.batch_pixels, arr.shape[0]))
        return torch.as_tensor(arr[rows], dtype=dt), torch.as_tensor(bank, dtype=dt)

    codebook_ready = not quantized
    unused_steps = np.zeros(config.codebook_size, dtype=np.int64)
    curve = []
    for step in range(config.steps):
        x_t, bank_t = sample_batch()
        if not codebook_ready:
            # seed the codebook from the first batch's encoder outputs
            with torch.no_grad():
                z0 = _mlp_t(enc, x_t)
            pick = rng.choice(z0.shape[0], size=config.codebook_size, replace=z0.shape[0] < config.codebook_size)
            with torch.no_grad():
                entries.copy_(z0[pick])
                entries.add_(torch.as_tensor(
                    rng.normal(0.0, 1e-4, size=entries.shape), dtype=dt))
            codebook_ready = True

        for p in params.values():
            if p.grad is not None:
                p.grad = None

        if quantized:
            out = _loss_graph(enc, dec, entries, x_t, bank_t, config.lambdas, config.beta)
            record = {"step": step, "l_r": float(out["l_r"].detach()), "l_emb": float(out["l_emb"].detach()),
                      "l_mask": float(out["l_mask"].detach()), "l_lqc": float(out["total"].detach())}
            out["grad_scalar"].backward()
        else:
            x_hat = _mlp_t(dec, _mlp_t(enc, x_t))
            l_r = ((x_t - x_hat) ** 2).mean()
            record = {"step": step, "l_r": float(l_r.detach()), "l_emb": 0.0, "l_mask": 0.0,
                      "l_lqc": float(l_r.detach())}
            l_r.backward()

        if not math.isfinite(record["l_lqc"]):
            raise TrainingDivergedError(step, record)
        opt.step({k: p.grad for k, p in params.items()})

        if quantized:
            with torch.no_grad():
                used = torch.unique(out["indices"]).numpy()
            unused_steps += 1
            unused_steps[used] = 0
            dead = np.nonzero(unused_steps >= config.dead_code_steps)[0]
            if dead.size:
                with torch.no_grad():
                    z_cur = _mlp_t(enc, x_t)
                    pick = rng.integers(0, z_cur.shape[0], size=dead.size)
                    entries[torch.as_tensor(dead)] = z_cur[pick]
                opt.reset_rows("codebook", torch.as_tensor(dead))
                unused_steps[dead] = 0
        if config.log_every > 1 and step % config.log_every and step != config.steps - 1:
            continue
        curve.append(record)

    model = LqcModel(
        encoder=[(W.detach().numpy().astype(np.float64), b.detach().numpy().astype(np.float64)) for W, b in enc],
        decoder=[(W.detach().numpy().astype(np.float64), b.detach().numpy().astype(np.float64)) for W, b in dec],
        codebook=Codebook(entries=entries.detach().numpy().astype(np.float64)),
        lambdas=config.lambdas,
        beta=config.beta,
    )
    return model, curve


def normalize_latent_space(model: LqcModel) -> LqcModel:
    """Fold a zero-mean, unit-RMS affine change of latent coordinates into the model.

    Uses a single scalar scale so nearest-neighbor indices, quantized values,
    and reconstructions are unchanged; only the latent coordinates move.
    Keeps downstream latent-space consumers (field fitting, pair losses)
    well-conditioned regardless of where the encoder settled.
    """
    entries = model.codebook.entries
    mu = entries.mean(axis=0)
    s = float(np.sqrt(((entries - mu) ** 2).mean()))
    if s < 1e-12:
        s = 1.0
    enc = [(W.copy(), b.copy()) for W, b in model.encoder]
    dec = [(W.copy(), b.copy()) for W, b in model.decoder]
    w_last, b_last = enc[-1]
    enc[-1] = (w_last / s, (b_last - mu) / s)
    w_first, b_first = dec[0]
    dec[0] = (w_first * s, b_first + w_first @ mu)
    return LqcModel(
        encoder=enc, decoder=dec,
        codebook=Codebook(entries=(entries - mu) / s),
        lambdas=model.lambdas, beta=model.beta,
    )


def train_lqc(dataset, config: LqcTrainConfig):
    """Adam training of the quantized compressor; returns (model, per-step loss curve).

    The returned model's latent coordinates are normalized (codebook zero-mean,
    unit RMS), which does not change its input/output behavior.
    """
    model, curve = _train_loop(dataset, config, quantized=True)
    return normalize_latent_space(model), curve


def train_autoencoder_baseline(dataset, config: LqcTrainConfig):
    """Continuous autoencoder with identical shapes, reconstruction loss only."""
    return _train_loop(dataset, config, quantized=False)


# ---------------------------------------------------------------------------
# checkpoints (same manifest + raw blob conventions as the bundle format)

def save_lqc(model: LqcModel, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, layers in (("enc", model.encoder), ("dec", model.decoder)):
        for i, (W, b) in enumerate(layers):
            arrays[f"{name}.{i}.W"] = W
            arrays[f"{name}.{i}.b"] = b
    arrays["codebook"] = model.codebook.entries
    manifest = {
        "format": "lqc-checkpoint", "version": 1,
        "channels": model.C, "latent": model.D,
        "codebook_size": model.codebook.K,
        "lambdas": list(model.lambdas), "beta": model.beta,
        "encoder_layers": len(model.encoder), "decoder_layers": len(model.decoder),
        "arrays": {k: {"file": f"{k}.f32", "shape": list(v.shape)} for k, v in arrays.items()},
    }
    for k, v in arrays.items():
        rawio.write_f32(root / f"{k}.f32", v)
    rawio.write_json(root / "manifest.json", manifest)


def load_lqc(path) -> LqcModel:
    root = Path(path)
    manifest = rawio.read_json(root / "manifest.json")
    if manifest.get("format") != "lqc-checkpoint":
        raise ValueError(f"{root}: not an LQC checkpoint")

    def arr(k):
        info = manifest["arrays"][k]
        return rawio.read_f32(root / info["file"], tuple(info["shape"])).astype(np.float64)

    encoder = [(arr(f"enc.{i}.W"), arr(f"enc.{i}.b")) for i in range(manifest["encoder_layers"])]
    decoder = [(arr(f"dec.{i}.W"), arr(f"dec.{i}.b")) for i in range(manifest["decoder_layers"])]
    model = LqcModel(
        encoder=encoder, decoder=decoder,
        codebook=Codebook(entries=arr("codebook")),
        lambdas=tuple(manifest["lambdas"]), beta=manifest.get("beta", 0.0),
    )
    model.validate()
    return model
