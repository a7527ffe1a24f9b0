"""Grammar variational autoencoder over one-hot production-rule sequences."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .grammar import Grammar, RuleSequence, one_hot_batch, sequence_masks

_MAGIC = b"GVAE"
_FORMAT = 1
MASKED_LOGIT = -30.0  # sigmoid(-30) ~ 1e-13: masked entries contribute ~0 loss and gradient


@dataclass
class GvaeConfig:
    d_z: int = 16
    hidden: int = 48
    conv_channels: tuple[int, int, int] = (9, 9, 10)
    kernels: tuple[int, int, int] = (7, 8, 9)
    dense: int = 96
    gru_layers: int = 3
    dropout: float = 0.0
    position_input: bool = False  # append a normalized step index to each decoder input

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.kernels = tuple(self.kernels)
        if len(self.conv_channels) != 3 or len(self.kernels) != 3:
            raise ValueError("encoder has exactly three convolutions")


@dataclass
class TrainConfig:
    beta_kl: float = 1e-3
    lr: float = 1e-3
    plateau_factor: float = 0.9
    plateau_patience: int = 20
    min_lr: float = 5e-5
    early_stop: int = 60
    max_epochs: int = 300
    batch_size: int = 64
    val_fraction: float = 0.1
    grammar_masks: bool = True
    seed: int = 0
    max_seconds: float | None = None
    monitor: str = "val_total"  # or "val_exact": held-out exact argmax reconstruction

    def __post_init__(self):
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")
        if self.monitor not in ("val_total", "val_exact"):
            raise ValueError(f"unknown monitor {self.monitor!r}")


class GvaeModel(nn.Module):
    def __init__(self, n_max: int, n_rules: int, cfg: GvaeConfig = GvaeConfig()):
        super().__init__()
        self.n_max, self.n_rules, self.cfg = n_max, n_rules, cfg
        c1, c2, c3 = cfg.conv_channels
        k1, k2, k3 = cfg.kernels
        out_len = n_max - (k1 - 1) - (k2 - 1) - (k3 - 1)
        if out_len < 1:
            raise ValueError(f"kernels {cfg.kernels} too wide for N_max={n_max}")
        self.encoder = nn.Sequential(
            nn.Conv1d(n_rules, c1, k1), nn.ReLU(),
            nn.Conv1d(c1, c2, k2), nn.ReLU(),
            nn.Conv1d(c2, c3, k3), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(c3 * out_len, cfg.dense), nn.ReLU(),
        )
        self.to_mean = nn.Linear(cfg.dense, cfg.d_z)
        self.to_logvar = nn.Linear(cfg.dense, cfg.d_z)
        self.to_state = nn.Linear(cfg.d_z, 2 * cfg.gru_layers * cfg.hidden)
        self.gru = nn.GRU(cfg.d_z + int(cfg.position_input), cfg.hidden, num_layers=cfg.gru_layers,
                          batch_first=True, bidirectional=True, dropout=cfg.dropout)
        self.head = nn.Sequential(nn.ELU(), nn.Linear(cfg.hidden, n_rules))

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: (B, N_max, |P|) one-hot rows."""
        h = self.encoder(x.transpose(1, 2))
        return self.to_mean(h), self.to_logvar(h)

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        b = z.shape[0]
        h0 = self.to_state(z).view(b, 2 * self.cfg.gru_layers, self.cfg.hidden).transpose(0, 1).contiguous()
        seq = z.unsqueeze(1).expand(b, self.n_max, z.shape[1])
        if self.cfg.position_input:
            pos = torch.linspace(0.0, 1.0, self.n_max, dtype=z.dtype).view(1, -1, 1).expand(b, -1, 1)
            seq = torch.cat([seq, pos], dim=-1)
        out, _ = self.gru(seq, h0)
        out = out[..., : self.cfg.hidden] + out[..., self.cfg.hidden:]
        return self.head(out)

    def forward(self, x: torch.Tensor, eps: torch.Tensor | None = None):
        mean, logvar = self.encode(x)
        z = mean if eps is None else mean + torch.exp(0.5 * logvar) * eps
        return self.decode_logits(z), mean, logvar

    # -- checkpoint -----------------------------------------------------
    def header(self, grammar_hash: str) -> dict:
        return {
            "format": _FORMAT, "grammar_hash": grammar_hash, "n_max": self.n_max, "n_rules": self.n_rules,
            "d_z": self.cfg.d_z, "layers": asdict(self.cfg),
            "params": [[k, list(v.shape)] for k, v in self.state_dict().items()],
        }

    def to_bytes(self, grammar_hash: str) -> bytes:
        head = json.dumps(self.header(grammar_hash), sort_keys=True).encode()
        body = b"".join(v.detach().cpu().double().numpy().astype("<f8").tobytes() for v in self.state_dict().values())
        return _MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, blob: bytes, grammar: Grammar | None = None) -> "GvaeModel":
        if blob[:4] != _MAGIC:
            raise ValueError("not a GVAE checkpoint")
        (n,) = struct.unpack("<I", blob[4:8])
        meta = json.loads(blob[8:8 + n])
        if meta["format"] != _FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta['format']}")
        if grammar is not None:
            if meta["grammar_hash"] != grammar.hash or meta["n_rules"] != grammar.n_rules:
                raise ValueError("checkpoint was trained on a different grammar")
            if meta["n_max"] != grammar.n_max:
                raise ValueError(f"checkpoint N_max {meta['n_max']} != grammar N_max {grammar.n_max}")
        model = cls(meta["n_max"], meta["n_rules"], GvaeConfig(**meta["layers"]))
        state, off = {}, 8 + n
        for name, shape in meta["params"]:
            size = int(np.prod(shape)) * 8
            arr = np.frombuffer(blob[off:off + size], dtype="<f8").reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
            off += size
        ref = model.state_dict()
        model.load_state_dict({k: v.to(ref[k].dtype) for k, v in state.items()})
        return model.eval()

    def save(self, path, grammar: Grammar) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(grammar.hash))

    @classmethod
    def load(cls, path, grammar: Grammar | None = None) -> "GvaeModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), grammar)


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(q || N(0, I))."""
    return 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1.0).sum(-1)


def reparametrize(mean, logvar, seed: int) -> np.ndarray:
    mean, logvar = np.asarray(mean, dtype=float), np.asarray(logvar, dtype=float)
    eps = np.random.default_rng(seed).standard_normal(mean.shape)
    return mean + np.exp(0.5 * logvar) * eps


def vae_loss(model: GvaeModel, x: torch.Tensor, mask: torch.Tensor | None, beta_kl: float,
             eps: torch.Tensor | None):
    """(total, bce, kl) batch means; BCE summed over the N_max x |P| entries."""
    logits, mean, logvar = model(x, eps)
    if mask is not None:
        logits = torch.where(mask, logits, torch.full_like(logits, MASKED_LOGIT))
    bce = nn.functional.binary_cross_entropy_with_logits(logits, x, reduction="none").sum((1, 2)).mean()
    kl = kl_divergence(mean, logvar).mean()
    total = bce + beta_kl * kl if beta_kl > 0 else bce
    return total, bce, kl


# -- decoding ---------------------------------------------------------------

def min_expansion(g: Grammar) -> dict[str, int]:
    """Fewest rules needed to fully expand each nonterminal."""
    inf = math.inf
    best = {a: inf for a in g.nonterminals}
    changed = True
    while changed:
        changed = False
        for r in g.rules:
            if r.is_padding:
                continue
            cost = 1 + sum(best[s] for s in r.rhs if s in g.nonterminals)
            if cost < best[r.lhs]:
                best[r.lhs], changed = cost, True
    return best


class MaskedDecoder:
    """Turns per-step logits into a valid rule sequence.

    Beyond the stack-top mask, a rule is admissible only if the derivation can
    still close within N_max afterwards, so the output is always complete.
    """

    def __init__(self, g: Grammar):
        self.g = g
        self.minlen = min_expansion(g)
        if self.minlen[g.start] > g.n_max:
            raise ValueError("N_max too small for any derivation")
        self.options = {}
        for a in g.nonterminals:
            self.options[a] = [
                (r.index, 1 + sum(self.minlen[s] for s in r.rhs if s in g.nonterminals),
                 [s for s in reversed(r.rhs) if s in g.nonterminals])
                for r in g.rules_for(a)
            ]

    def decode(self, logits: np.ndarray, mode: str = "argmax", rng: np.random.Generator | None = None) -> RuleSequence:
        g = self.g
        n = g.n_max
        if logits.shape != (n, g.n_rules):
            raise ValueError(f"logits shape {logits.shape} != {(n, g.n_rules)}")
        stack, pending = [g.start], self.minlen[g.start]
        out: list[int] = []
        for i in range(n):
            if not stack:
                break
            a = stack.pop()
            pending -= self.minlen[a]
            budget = n - i - pending
            cand = [o for o in self.options[a] if o[1] <= budget]
            scores = np.array([logits[i, idx - 1] for idx, _, _ in cand])
            if mode == "argmax":
                k = int(np.argmax(scores))  # first maximum: lowest rule index on ties
            elif mode == "sample":
                p = np.exp(scores - scores.max())
                k = int((rng or np.random.default_rng()).choice(len(cand), p=p / p.sum()))
            else:
                raise ValueError(f"unknown mode {mode!r}")
            idx, _, push = cand[k]
            out.append(idx)
            stack.extend(push)
            pending += sum(self.minlen[s] for s in push)
        logical = len(out)
        return RuleSequence(tuple(out) + (g.padding_index,) * (n - logical), logical)


def decode_latent(model: GvaeModel, g: Grammar, z, mode: str = "argmax", seed: int | None = None,
                  decoder: MaskedDecoder | None = None) -> list[RuleSequence]:
    """Decode a batch (or a single vector) of latent points."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    dtype = next(model.parameters()).dtype
    model.eval()  # dropout off: decoding must be a function of z
    with torch.no_grad():
        logits = model.decode_logits(torch.as_tensor(z, dtype=dtype)).double().numpy()
    dec = decoder or MaskedDecoder(g)
    rng = np.random.default_rng(seed)
    return [dec.decode(lg, mode, rng) for lg in logits]


def encode_sequences(model: GvaeModel, g: Grammar, seqs: Sequence[RuleSequence]) -> tuple[np.ndarray, np.ndarray]:
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(one_hot_batch(g, seqs), dtype=dtype)
    model.eval()
    with torch.no_grad():
        mean, logvar = model.encode(x)
    return mean.double().numpy(), logvar.double().numpy()


def latent_statistics(model: GvaeModel, g: Grammar, seqs: Sequence[RuleSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std of the encoder means over ``seqs``."""
    mean, _ = encode_sequences(model, g, seqs)
    return mean.mean(0), np.maximum(mean.std(0), 1e-6)


def reconstruction_accuracy(model: GvaeModel, g: Grammar, seqs: Sequence[RuleSequence]) -> float:
    """Fraction reproduced exactly by argmax decoding of the encoder mean."""
    if not seqs:
        return float("nan")
    return _exact_fraction(model, g, seqs, MaskedDecoder(g))


def _exact_fraction(model, g, seqs, dec) -> float:
    if not seqs:
        return float("nan")
    mean, _ = encode_sequences(model, g, seqs)
    hits = sum(r.indices == s.indices for r, s in zip(decode_latent(model, g, mean, decoder=dec), seqs))
    return hits / len(seqs)


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: GvaeModel
    log: list[dict] = field(default_factory=list)
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    stopped_early: bool = False
    best_epoch: int = 0


class TrainingDivergence(RuntimeError):
    pass


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(g: Grammar, seqs: Sequence[RuleSequence], model_cfg: GvaeConfig = GvaeConfig(),
          cfg: TrainConfig = TrainConfig(), log_path=None, progress=None,
          init: GvaeModel | None = None, start_epoch: int = 0) -> TrainResult:
    """Fit a model (fresh, or continuing ``init``); returns the best-validation weights and the log."""
    import time

    torch.manual_seed(cfg.seed)
    model = init if init is not None else GvaeModel(g.n_max, g.n_rules, model_cfg)
    model_cfg = model.cfg
    x_all = torch.as_tensor(one_hot_batch(g, seqs))
    m_all = torch.as_tensor(np.stack([sequence_masks(g, s) for s in seqs])) if cfg.grammar_masks else None
    tr, va = split_indices(len(seqs), cfg.val_fraction, cfg.seed)
    if len(va) == 0:
        va = tr
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    by_exact = cfg.monitor == "val_exact"
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max" if by_exact else "min", factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    best, best_state, best_epoch, log = math.inf, copy.deepcopy(model.state_dict()), 0, []
    start = time.monotonic()
    stopped = False

    def subset(idx):
        t = torch.as_tensor(idx)
        return x_all[t], (m_all[t] if m_all is not None else None)

    xv, mv = subset(va)
    val_seqs = [seqs[i] for i in va]
    decoder = MaskedDecoder(g)
    best_epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.max_epochs + 1):
        model.train()
        order = tr[torch.randperm(len(tr), generator=gen).numpy()]
        sums = np.zeros(3)
        for s in range(0, len(order), cfg.batch_size):
            xb, mb = subset(order[s:s + cfg.batch_size])
            eps = torch.randn(xb.shape[0], model_cfg.d_z, generator=gen)
            total, bce, kl = vae_loss(model, xb, mb, cfg.beta_kl, eps)
            if not torch.isfinite(total):
                model.load_state_dict(best_state)
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}; best weights restored")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([total.item(), bce.item(), kl.item()]) * xb.shape[0]
        sums /= len(order)
        model.eval()
        with torch.no_grad():
            v_total, _, _ = vae_loss(model, xv, mv, cfg.beta_kl, None)
        v = v_total.item()
        exact = _exact_fraction(model, g, val_seqs, decoder)
        score = -exact if by_exact else v
        sched.step(exact if by_exact else v)
        lr = opt.param_groups[0]["lr"]
        log.append({"epoch": epoch, "bce": sums[1], "kl": sums[2],
                    "total": sums[0] if cfg.beta_kl > 0 else sums[1], "val_total": v, "val_exact": exact, "lr": lr})
        if progress:
            progress(log[-1])
        if score < best:
            best, best_epoch, best_state = score, epoch, copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= cfg.early_stop:
            stopped = True
            break
        if cfg.max_seconds is not None and time.monotonic() - start > cfg.max_seconds:
            break
    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(model, log, tr, va, stopped, best_epoch)


def write_log(log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "bce", "kl", "total", "val_total", "val_exact", "lr"])
        w.writeheader()
        for row in log:
            w.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})
