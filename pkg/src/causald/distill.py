"""Heterogeneous teachers, front-door label distillation, back-door feature distillation.

Training objective for the student::

    L = L_rec + lambda_bda * L_bda + lambda_fda * (L_distill + L_consistency)

Gradient routing is enforced with detach nodes: the consistency term only
reaches the attention matrices and psi_fda (the student mediator entering the
attention is detached), and the distillation term only reaches the student
(its target is detached).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GroupAssignment, PreparedData
from .models import EncoderPredictor, ModelConfig, TrainBatch, make_batch, rec_loss
from .seeds import derive_seed

_log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, what: str = "loss"):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite {what} at epoch {epoch}, step {step}")


@dataclass
class DistillConfig:
    n_teachers: int = 4
    lambda_bda: float = 1.0
    lambda_fda: float = 1.0
    lambda_kd: float = 1.0
    batch_size: int = 4096
    epochs: int = 10
    learning_rate: float = 0.01
    l2: float = 1e-6
    feature_mode: str = "bda"
    split_attribute: str = "activeness"
    fda_hidden: int = 16
    kd_temperature: float = 1.0
    ips_clip: float = 0.1
    teacher_init: str = "shared"
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.n_teachers < 1:
            raise ValueError("n_teachers must be >= 1")
        for name in ("lambda_bda", "lambda_fda", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.feature_mode not in ("vanilla", "bda"):
            raise ValueError(f"feature_mode must be vanilla or bda, got {self.feature_mode!r}")
        if self.teacher_init not in ("shared", "independent"):
            raise ValueError(f"teacher_init must be shared or independent, got {self.teacher_init!r}")
        if not 0 < self.ips_clip <= 1:
            raise ValueError("ips_clip must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TeacherEnsemble:
    teachers: list[EncoderPredictor]
    pz: np.ndarray
    group_sizes: np.ndarray
    attribute: str = ""
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.teachers)


@dataclass
class FdaHead:
    """Attention matrices for P(M|X) and the light network psi_fda for P(Y|M,X)."""

    params: dict[str, Tensor]
    mediator_dim: int
    item_dim: int

    @classmethod
    def create(cls, mediator_dim: int, item_dim: int, hidden: int, rng: np.random.Generator) -> "FdaHead":
        dm = mediator_dim
        params = {
            "W1": ad.parameter((dm, dm), rng, name="W1"),
            "W2": ad.parameter((dm, dm), rng, name="W2"),
            "psi.w0": ad.parameter((2 * dm + item_dim, hidden), rng, name="psi.w0"),
            "psi.b0": ad.zeros_parameter((hidden,), name="psi.b0"),
            "psi.w1": ad.parameter((hidden, 1), rng, name="psi.w1"),
            "psi.b1": ad.zeros_parameter((1,), name="psi.b1"),
        }
        return cls(params, dm, item_dim)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"head.{k}": v.data for k, v in self.params.items()}


# ---------------------------------------------------------------- training loop


LossHook = Callable[[TrainBatch, Tensor, Tensor, Tensor, dict], Tensor]


def fit(
    model: EncoderPredictor,
    data: PreparedData,
    cfg: DistillConfig,
    seed: int,
    hook: LossHook | None = None,
    extra_params: Sequence[Tensor] = (),
    weight_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    tag: str = "base",
) -> list[dict]:
    """Adagrad over shuffled mini-batches; returns one log row per epoch."""
    opt = ad.Adagrad(model.parameters() + list(extra_params), lr=cfg.learning_rate)
    rows = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        pairs = data.epoch_pairs(derive_seed(seed, "negatives", epoch))
        order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(len(pairs))
        totals: dict[str, float] = {}
        n_seen = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = make_batch(pairs, order[start : start + cfg.batch_size], model.config.max_history)
            if weight_fn is not None:
                batch.weights = weight_fn(batch.users, batch.targets)
            opt.zero_grad()
            m_hat, prob = model.forward(batch)
            loss = rec_loss(prob, batch.labels, model, cfg.l2, batch.weights)
            parts = {"L_Rec": loss.item()}
            if hook is not None:
                loss = hook(batch, m_hat, prob, loss, parts)
            if not np.isfinite(loss.item()):
                raise DivergenceError(epoch, step)
            ad.backward(loss)
            opt.step()
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v * len(batch)
            n_seen += len(batch)
        row = {"epoch": epoch, **{k: v / max(n_seen, 1) for k, v in totals.items()}}
        row["wall_seconds"] = time.perf_counter() - t0
        _log.info("%s epoch %d %s", tag, epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        rows.append(row)
    return rows


def init_model(model_cfg: ModelConfig, seed: int) -> EncoderPredictor:
    return EncoderPredictor.create(model_cfg, np.random.default_rng(derive_seed(seed, "init")))


def train_base(data: PreparedData, model_cfg: ModelConfig, cfg: DistillConfig, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    model = init_model(model_cfg, seed)
    return model, fit(model, data, cfg, seed)


# ---------------------------------------------------------------- teachers


def group_prior(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    return sizes / sizes.sum()


def train_teachers(
    subsets: Sequence[PreparedData],
    model_cfg: ModelConfig,
    cfg: DistillConfig,
    group_sizes: Sequence[int] | None = None,
    attribute: str = "",
) -> TeacherEnsemble:
    """One frozen teacher per subset, trained with the recommendation loss only."""
    for k, sub in enumerate(subsets):
        if len(sub.positives) == 0:
            raise ValueError(f"teacher subset {k} is empty")
    if group_sizes is None:
        group_sizes = [len(np.unique(s.positives.users)) for s in subsets]
    seeds = [derive_seed(cfg.seed, "teacher", k) for k in range(len(subsets))]

    def one(k: int) -> EncoderPredictor:
        init_seed = cfg.seed if cfg.teacher_init == "shared" else seeds[k]
        model = init_model(model_cfg, init_seed)
        fit(model, subsets[k], cfg, seeds[k], tag=f"teacher{k}")
        return model.frozen()

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            teachers = list(pool.map(one, range(len(subsets))))
    else:
        teachers = [one(k) for k in range(len(subsets))]
    return TeacherEnsemble(teachers, group_prior(group_sizes), np.asarray(group_sizes), attribute, seeds)


def mediator_samples(teachers: TeacherEnsemble, batch: TrainBatch) -> np.ndarray:
    """(B, K, d_m) teacher encodings; teachers are frozen so nothing is recorded."""
    return np.stack([t.encode(batch).data for t in teachers.teachers], axis=1)


def bda_mediator(m_tilde: np.ndarray, pz: np.ndarray) -> np.ndarray:
    """Prior-weighted teacher mediators, ``sum_k pz_k m_k``; input is (B, K, d_m)."""
    return np.einsum("bkd,k->bd", m_tilde, np.asarray(pz, dtype=float))


def attention_weights(head: FdaHead, m_tilde: Tensor | np.ndarray, m_hat: Tensor) -> Tensor:
    """alpha_{i,k} = softmax_k <W1 m_tilde_{i,k}, W2 m_hat_i>, shape (B, K)."""
    m_tilde = m_tilde if isinstance(m_tilde, Tensor) else ad.tensor(m_tilde)
    K = m_tilde.shape[1]
    keys = ad.matmul(m_tilde, head.params["W1"])
    query = ad.expand(ad.matmul(m_hat, head.params["W2"]), 1, K)
    return ad.softmax(ad.sum(ad.mul(keys, query), axis=-1))


@numba.njit(cache=True)
def _fda_forward(pre_j, pre_ki, w, b):
    I, K, H = pre_ki.shape
    J = pre_j.shape[0]
    out = np.empty((I, K))
    for i in range(I):
        for k in range(K):
            acc = 0.0
            for j in range(J):
                z = b
                for h in range(H):
                    v = pre_j[j, h] + pre_ki[i, k, h]
                    if v > 0.0:
                        z += w[h] * v
                acc += 1.0 / (1.0 + np.exp(-z))
            out[i, k] = acc / J
    return out


@numba.njit(cache=True)
def _fda_backward(pre_j, pre_ki, w, b, g):
    I, K, H = pre_ki.shape
    J = pre_j.shape[0]
    g_pj = np.zeros_like(pre_j)
    g_pki = np.zeros_like(pre_ki)
    g_w = np.zeros(H)
    g_b = 0.0
    for i in range(I):
        for k in range(K):
            for j in range(J):
                z = b
                for h in range(H):
                    v = pre_j[j, h] + pre_ki[i, k, h]
                    if v > 0.0:
                        z += w[h] * v
                s = 1.0 / (1.0 + np.exp(-z))
                dz = g[i, k] * s * (1.0 - s) / J
                g_b += dz
                for h in range(H):
                    v = pre_j[j, h] + pre_ki[i, k, h]
                    if v > 0.0:
                        g_w[h] += dz * v
                        dh = dz * w[h]
                        g_pki[i, k, h] += dh
                        g_pj[j, h] += dh
    return g_pj, g_pki, g_w, g_b


def fda_expectation(pre_j: Tensor, pre_ki: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out[i, k] = mean_j sigmoid(relu(pre_j[j] + pre_ki[i, k]) @ w + b).

    The first psi_fda layer is linear in the concatenation
    ``[m_j, m_{k,i}, y_i]``, so its pre-activation splits into a per-j and a
    per-(i, k) part. The fused kernel walks (i, k, j) without materialising
    the (N_b, K, N_b, hidden) tensor.
    """
    I, K, H = pre_ki.shape
    J = pre_j.shape[0]
    if pre_j.shape[1] != H or w.shape != (H, 1) or b.shape != (1,):
        ad._fail("fda_expectation", f"pre_j {pre_j.shape}, pre_ki {pre_ki.shape}, w {w.shape}, b {b.shape}")
    if J == 0:
        ad._fail("fda_expectation", "empty batch")
    pj = np.ascontiguousarray(pre_j.data)
    pki = np.ascontiguousarray(pre_ki.data)
    wv = np.ascontiguousarray(w.data[:, 0])
    bv = float(b.data[0])
    out = _fda_forward(pj, pki, wv, bv)

    def backward(g):
        g_pj, g_pki, g_w, g_b = _fda_backward(pj, pki, wv, bv, np.ascontiguousarray(g))
        return g_pj, g_pki, g_w[:, None], np.array([g_b])

    return ad.custom(out, "fda_expectation", (pre_j, pre_ki, w, b), backward)


def fda_label(head: FdaHead, m_tilde, m_cross, y_emb, alpha: Tensor) -> Tensor:
    """Front-door estimate of P(Y | do(X)) per instance.

    ``o_i = sum_k alpha_{i,k} (1/N_b) sum_j sigmoid(psi_fda([m_j, m_{k,i}, y_i]))``
    where ``j`` runs over the whole batch, ``i`` included.
    """
    wrap = lambda x: x if isinstance(x, Tensor) else ad.tensor(x)  # noqa: E731
    m_tilde, m_cross, y_emb = wrap(m_tilde), wrap(m_cross), wrap(y_emb)
    p = head.params
    dm, d = head.mediator_dim, head.item_dim
    K = m_tilde.shape[1]
    w_cross = ad.slice_axis(p["psi.w0"], 0, dm)
    w_med = ad.slice_axis(p["psi.w0"], dm, 2 * dm)
    w_item = ad.slice_axis(p["psi.w0"], 2 * dm, 2 * dm + d)
    pre_j = ad.matmul(m_cross, w_cross)
    pre_ki = ad.add(ad.add(ad.matmul(m_tilde, w_med), ad.expand(ad.matmul(y_emb, w_item), 1, K)), p["psi.b0"])
    inner = fda_expectation(pre_j, pre_ki, p["psi.w1"], p["psi.b1"])
    return ad.sum(ad.mul(alpha, inner), axis=-1)


def _logit(p: np.ndarray) -> np.ndarray:
    q = np.clip(p, ad.PROB_CLAMP, 1 - ad.PROB_CLAMP)
    return np.log(q) - np.log1p(-q)


def fda_loss(o_tilde: Tensor, o_hat: Tensor, labels: np.ndarray, temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """(distillation, consistency).

    Distillation pulls the student toward the detached front-door label;
    consistency fits the front-door label to the observed clicks.
    """
    target = ad.detach(o_tilde)
    if temperature == 1.0:
        distill = ad.binary_cross_entropy(o_hat, target)
    else:
        soft_t = 1.0 / (1.0 + np.exp(-_logit(target.data) / temperature))
        q = np.clip(o_hat.data, ad.PROB_CLAMP, 1 - ad.PROB_CLAMP)
        logit_node = ad.custom(_logit(q), "logit", (o_hat,), lambda g: (g / (q * (1 - q)),))
        soft_hat = ad.sigmoid(ad.scale(logit_node, 1.0 / temperature))
        distill = ad.scale(ad.binary_cross_entropy(soft_hat, soft_t), temperature**2)
    consistency = ad.binary_cross_entropy(o_tilde, np.asarray(labels, dtype=float))
    return distill, consistency


def feature_distill_loss(guidance: np.ndarray, m_hat: Tensor) -> Tensor:
    """Mean over the batch of ``||m_hat_i - guidance_i||^2``."""
    diff = ad.sub(m_hat, ad.tensor(guidance))
    return ad.scale(ad.sum_squares(diff), 1.0 / max(m_hat.shape[0], 1))


# ---------------------------------------------------------------- CausalD


@dataclass
class CausalDResult:
    student: EncoderPredictor
    head: FdaHead
    log: list[dict]


def causald_hook(teachers: TeacherEnsemble, head: FdaHead, student: EncoderPredictor, cfg: DistillConfig) -> LossHook:
    def hook(batch, m_hat, prob, loss, parts):
        if cfg.lambda_bda == 0 and cfg.lambda_fda == 0:
            return loss
        m_tilde = mediator_samples(teachers, batch)
        if cfg.feature_mode == "bda":
            guidance = bda_mediator(m_tilde, teachers.pz)
        else:
            guidance = m_tilde.mean(axis=1)
        if cfg.lambda_bda > 0:
            l_bda = feature_distill_loss(guidance, m_hat)
            parts["L_BDA"] = l_bda.item()
            loss = ad.add(loss, ad.scale(l_bda, cfg.lambda_bda))
        if cfg.lambda_fda > 0:
            alpha = attention_weights(head, m_tilde, ad.detach(m_hat))
            y_emb = student.params["item_emb"].data[batch.targets]
            o_tilde = fda_label(head, m_tilde, guidance, y_emb, alpha)
            distill, consistency = fda_loss(o_tilde, prob, batch.labels, cfg.kd_temperature)
            parts["L_FDA_distill"] = distill.item()
            parts["L_FDA_consistency"] = consistency.item()
            loss = ad.add(loss, ad.scale(ad.add(distill, consistency), cfg.lambda_fda))
        return loss

    return hook


def train_causald(
    data: PreparedData,
    teachers: TeacherEnsemble,
    model_cfg: ModelConfig,
    cfg: DistillConfig,
    seed: int | None = None,
) -> CausalDResult:
    """Student trained on the full data with feature and front-door label distillation.

    With both lambdas at zero this is exactly :func:`train_base` under the same seed.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    student = init_model(model_cfg, seed)
    head = FdaHead.create(
        model_cfg.mediator_dim, model_cfg.embedding_dim, cfg.fda_hidden, np.random.default_rng(derive_seed(seed, "head"))
    )
    hook = causald_hook(teachers, head, student, cfg)
    log = fit(student, data, cfg, seed, hook=hook, extra_params=head.parameters(), tag="causald")
    return CausalDResult(student, head, log)


# ---------------------------------------------------------------- baselines


def train_kd_baseline(data: PreparedData, model_cfg: ModelConfig, cfg: DistillConfig, seed: int | None = None):
    """Single teacher on all users, then a student fit to labels plus teacher soft labels."""
    seed = cfg.seed if seed is None else seed
    teacher = init_model(model_cfg, seed)
    fit(teacher, data, cfg, derive_seed(seed, "kd-teacher"), tag="kd-teacher")
    teacher = teacher.frozen()
    student = init_model(model_cfg, seed)

    def hook(batch, m_hat, prob, loss, parts):
        if cfg.lambda_kd == 0:
            return loss
        soft = teacher.forward(batch)[1].data
        kd = ad.binary_cross_entropy(prob, soft)
        parts["L_KD"] = kd.item()
        return ad.add(loss, ad.scale(kd, cfg.lambda_kd))

    log = fit(student, data, cfg, seed, hook=hook, tag="kd")
    return student, teacher, log


def propensity_table(users: np.ndarray, items: np.ndarray, assignment: GroupAssignment, n_items: int) -> np.ndarray:
    """p(group | item) with +1 smoothing per group; shape (n_items, n_groups)."""
    G = assignment.n_groups
    counts = np.zeros((n_items, G))
    np.add.at(counts, (items, assignment.group[users]), 1.0)
    counts += 1.0
    return counts / counts.sum(axis=1, keepdims=True)


def ips_weights(
    users: np.ndarray, items: np.ndarray, assignment: GroupAssignment, clip_threshold: float, table: np.ndarray
) -> np.ndarray:
    """``1 / max(p(group(u) | i), clip)`` per sample."""
    if not 0 < clip_threshold <= 1:
        raise ValueError("clip threshold must lie in (0, 1]")
    p = table[items, assignment.group[users]]
    return 1.0 / np.maximum(p, clip_threshold)


def train_ips(
    data: PreparedData, assignment: GroupAssignment, model_cfg: ModelConfig, cfg: DistillConfig, seed: int | None = None
):
    seed = cfg.seed if seed is None else seed
    pos = data.positives.labels > 0
    table = propensity_table(data.positives.users[pos], data.positives.targets[pos], assignment, data.n_items)
    model = init_model(model_cfg, seed)

    def weight_fn(users, items):
        return ips_weights(users, items, assignment, cfg.ips_clip, table)

    return model, fit(model, data, cfg, seed, weight_fn=weight_fn, tag="ips")
