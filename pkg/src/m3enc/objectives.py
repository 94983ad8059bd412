"""Training objectives over the (layer, dim) granularity grid.

* multigranular MLM: one forward pass, one masked-cross-entropy cell per
  (tapped layer, truncation dim), summed without weights
* in-batch-negative contrastive loss, both as a plain similarity matrix and
  as a tiled streaming computation that never materializes the full matrix
* MRL fine-tuning: the contrastive loss summed over several truncation dims
* self-distillation: KL from a teacher (layer, dim) cell's token
  distribution to student cells, added to the multigranular MLM total
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import tensor as T
from .data import MlmBatch, PairBatch
from .encoder import GranularitySet, ModelConfig, Parameters
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

KL_FLOOR = 1e-12


@dataclass
class LossReport:
    """Per-(layer, dim) loss cells plus their aggregate.

    ``total`` always equals the plain sum of ``per_pair`` values plus
    ``lambda_d * aux`` when a distillation term is active. ``node`` is the
    autodiff handle for the total; call ``node.backward()`` to populate
    parameter gradients.
    """

    per_pair: dict[tuple[int, int], float]
    total: float
    aux: float | None = None
    node: Tensor | None = None


@dataclass(frozen=True)
class TileConfig:
    tile: int

    def __post_init__(self):
        if self.tile < 1:
            raise ConfigError(f"tile must be >= 1, got {self.tile}")


@dataclass(frozen=True)
class DistillPlan:
    """Teacher/student (layer, dim) pairs plus the loss weight and temperature."""

    pairs: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    lambda_d: float = 1.0
    tau_d: float = 1.0

    def __post_init__(self):
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be non-negative")
        if self.tau_d <= 0:
            raise ConfigError("tau_d must be positive")
        for teacher, student in self.pairs:
            if tuple(teacher) == tuple(student):
                raise ConfigError(f"teacher and student coincide: {teacher}")

    def cells(self) -> set[tuple[int, int]]:
        out = set()
        for teacher, student in self.pairs:
            out.add(tuple(teacher))
            out.add(tuple(student))
        return out


def build_distill_plan(
    mode: str,
    teacher: tuple[int, int],
    student: tuple[int, int] | None,
    grid: GranularitySet,
    lambda_d: float = 1.0,
    tau_d: float = 1.0,
) -> DistillPlan:
    """'all_from_top' pairs the teacher with every other grid cell;
    'single_pair' names one student explicitly."""
    teacher = (int(teacher[0]), int(teacher[1]))
    cells = grid.grid
    if teacher not in cells:
        raise ConfigError(f"teacher {teacher} is not a grid cell of {grid}")
    if mode == "all_from_top":
        pairs = tuple((teacher, cell) for cell in cells if cell != teacher)
    elif mode == "single_pair":
        if student is None:
            raise ConfigError("single_pair mode requires a student cell")
        student = (int(student[0]), int(student[1]))
        if student not in cells:
            raise ConfigError(f"student {student} is not a grid cell of {grid}")
        pairs = ((teacher, student),)
    else:
        raise ConfigError(f"unknown distillation mode {mode!r}")
    return DistillPlan(pairs=pairs, lambda_d=lambda_d, tau_d=tau_d)


# ---------------------------------------------------------------------------
# Multigranular MLM
# ---------------------------------------------------------------------------


def _gather_masked(state: Tensor, mask_positions: np.ndarray) -> Tensor:
    """Rows of a [B x s x M] state at the masked positions, as [n x M]."""
    b, s, m = state.shape
    flat_idx = np.flatnonzero(mask_positions.reshape(-1))
    return T.take_rows(T.reshape(state, (b * s, m)), flat_idx)


def _segmented_head_logits(params: Parameters, h_masked: Tensor,
                           dims: tuple[int, ...]) -> dict[int, Tensor]:
    """Head logits for every truncation dim, sharing partial products.

    logits(d_{j+1}) = logits(d_j) + h[:, d_j:d_{j+1}] @ W[d_j:d_{j+1}, :], so
    the full grid costs one max(d)-wide projection instead of sum(d).
    """
    out: dict[int, Tensor] = {}
    acc: Tensor | None = None
    prev = 0
    for d in dims:
        seg = T.matmul(T.slice_last(h_masked, prev, d),
                       T.slice_rows(params.mlm_head_w, prev, d))
        acc = seg if acc is None else T.add(acc, seg)
        out[d] = T.add(acc, params.mlm_head_b)
        prev = d
    return out


def _validate_mlm_batch(batch: MlmBatch) -> None:
    if not batch.mask_positions.any(axis=-1).all():
        raise ContractError("every sequence needs at least one masked position")


def matryoshka_mlm_loss(
    params: Parameters,
    config: ModelConfig,
    batch: MlmBatch,
    granularity: GranularitySet | None = None,
    *,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> LossReport:
    """Masked-LM loss summed over every (layer, dim) cell of the grid.

    One forward pass taps the selected layers; each cell projects the tapped
    state truncated to its dim through the shared head and scores the
    ground-truth tokens at the masked positions.
    """
    gran = granularity or config.granularity
    if len(gran) == 0:
        raise ConfigError("empty granularity grid")
    _validate_mlm_batch(batch)
    out = enc.forward(params, config, batch.tokens, batch.attn_mask,
                      taps=gran.layers, training=training, dropout_rng=dropout_rng)
    targets = batch.labels.reshape(-1)[np.flatnonzero(batch.mask_positions.reshape(-1))]
    all_true = np.ones(targets.shape[0], dtype=bool)
    per_pair: dict[tuple[int, int], float] = {}
    total: Tensor | None = None
    for l in gran.layers:
        h_masked = _gather_masked(out.tapped_states[l], batch.mask_positions)
        logits_by_dim = _segmented_head_logits(params, h_masked, gran.dims)
        for d in gran.dims:
            cell = T.masked_cross_entropy(logits_by_dim[d], targets, all_true)
            per_pair[(l, d)] = float(cell)
            total = cell if total is None else T.add(total, cell)
    return LossReport(per_pair=per_pair, total=float(total), node=total)


# ---------------------------------------------------------------------------
# Contrastive losses
# ---------------------------------------------------------------------------


def _check_normalized(emb: Tensor, name: str) -> None:
    norms = np.sqrt((emb.data * emb.data).sum(axis=-1))
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ContractError(f"{name} rows are not L2-normalized (norm off by > 1e-3)")


def infonce_from_scores(scores: Tensor) -> Tensor:
    """Mean over queries of -log softmax on an already temperature-scaled
    square score matrix whose diagonal holds the positives."""
    b, b2 = scores.shape
    if b != b2:
        raise ShapeError(f"score matrix must be square, got {scores.shape}")
    lse = T.logsumexp_rows(scores)
    diag = T.gather_last(scores, np.arange(b))
    return T.tmean(T.add(lse, T.scale(diag, -1.0)))


def contrastive_sft_loss(q_emb: Tensor, d_emb: Tensor, tau: float) -> Tensor:
    """In-batch-negative contrastive loss; row i's positive is document i.

    Scores are cosine similarities of the (already unit-norm) embeddings
    divided by the temperature; log-probabilities go through log-sum-exp.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if q_emb.ndim != 2 or q_emb.shape != d_emb.shape:
        raise ShapeError(f"embedding shapes disagree: {q_emb.shape} vs {d_emb.shape}")
    _check_normalized(q_emb, "query embeddings")
    _check_normalized(d_emb, "document embeddings")
    scores = T.scale(T.matmul(q_emb, T.transpose(d_emb, (1, 0))), 1.0 / tau)
    return infonce_from_scores(scores)


def tiled_contrastive_loss(
    q_emb: Tensor,
    d_emb: Tensor,
    tau: float,
    tile: TileConfig | int,
    shape_probe: list | None = None,
) -> Tensor:
    """Same value and gradients as ``contrastive_sft_loss``, computed by
    streaming column tiles of the score matrix with running log-sum-exp
    accumulators. No B x B array exists when tile < B; auxiliary storage is
    O(B * tile + tile^2).

    ``shape_probe``, when given a list, records the shape of every
    temporary array the computation allocates (a testing hook).
    """
    if isinstance(tile, int):
        tile = TileConfig(tile)
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if q_emb.ndim != 2 or q_emb.shape != d_emb.shape:
        raise ShapeError(f"embedding shapes disagree: {q_emb.shape} vs {d_emb.shape}")
    _check_normalized(q_emb, "query embeddings")
    _check_normalized(d_emb, "document embeddings")

    q, d = q_emb.data, d_emb.data
    b = q.shape[0]
    t = tile.tile
    inv_tau = 1.0 / tau

    def probe(arr: np.ndarray) -> np.ndarray:
        if shape_probe is not None:
            shape_probe.append(arr.shape)
        return arr

    diag = probe((q * d).sum(axis=1) * inv_tau)
    run_max = probe(np.full(b, -np.inf, dtype=q.dtype))
    run_sum = probe(np.zeros(b, dtype=q.dtype))
    for j0 in range(0, b, t):
        block = d[j0:j0 + t]
        scores = probe((q @ block.T) * inv_tau)
        new_max = probe(np.maximum(run_max, scores.max(axis=1)))
        run_sum = run_sum * np.exp(run_max - new_max) + np.exp(
            scores - new_max[:, None]).sum(axis=1)
        run_max = new_max
    lse = probe(run_max + np.log(run_sum))
    loss = float((lse - diag).mean())

    def bwd(g):
        coef = float(g) * inv_tau / b
        gq = np.zeros_like(q)
        gd = np.zeros_like(d)
        for j0 in range(0, b, t):
            block = d[j0:j0 + t]
            scores = probe((q @ block.T) * inv_tau)
            soft = probe(np.exp(scores - lse[:, None]))
            rows = np.arange(j0, min(j0 + t, b))
            soft[rows, rows - j0] -= 1.0
            gq += (soft @ block) * coef
            gd[j0:j0 + t] += (soft.T @ q) * coef
        return gq, gd

    return T._from_op(np.asarray(loss, dtype=q.dtype), "tiled_contrastive",
                      (q_emb, d_emb), bwd)


# ---------------------------------------------------------------------------
# Pair-batch objectives over the grid
# ---------------------------------------------------------------------------


def _pair_embeddings(params: Parameters, config: ModelConfig, batch: PairBatch,
                     layers: tuple[int, ...], *, training: bool = False,
                     dropout_rng: np.random.Generator | None = None):
    q_out = enc.forward(params, config, batch.query_tokens, batch.query_mask,
                        taps=layers, training=training, dropout_rng=dropout_rng)
    d_out = enc.forward(params, config, batch.doc_tokens, batch.doc_mask,
                        taps=layers, training=training, dropout_rng=dropout_rng)
    return q_out, d_out


def mrl_sft_loss(
    params: Parameters,
    config: ModelConfig,
    batch: PairBatch,
    dims: tuple[int, ...],
    layer: int,
    tau: float,
    tile: TileConfig | int | None = None,
    *,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> LossReport:
    """Contrastive loss summed over several truncation dims of one layer.

    Each dim's query/document embeddings are pooled, truncated, and
    independently re-normalized before its loss cell is computed.
    """
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ConfigError("dims must be non-empty")
    for d in dims:
        if d > config.hidden:
            raise ConfigError(f"dim {d} exceeds hidden={config.hidden}")
    q_out, d_out = _pair_embeddings(params, config, batch, (layer,),
                                    training=training, dropout_rng=dropout_rng)
    per_pair: dict[tuple[int, int], float] = {}
    total: Tensor | None = None
    for d in dims:
        q_emb = enc.pool(q_out.tapped_states[layer], batch.query_mask, d)
        d_emb = enc.pool(d_out.tapped_states[layer], batch.doc_mask, d)
        if tile is None:
            cell = contrastive_sft_loss(q_emb, d_emb, tau)
        else:
            cell = tiled_contrastive_loss(q_emb, d_emb, tau, tile)
        per_pair[(layer, d)] = float(cell)
        total = cell if total is None else T.add(total, cell)
    return LossReport(per_pair=per_pair, total=float(total), node=total)


def matryoshka_contrastive_loss(
    params: Parameters,
    config: ModelConfig,
    batch: PairBatch,
    tau: float,
    tile: TileConfig | int,
    granularity: GranularitySet | None = None,
    *,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> LossReport:
    """Tiled contrastive loss summed over every (layer, dim) grid cell."""
    gran = granularity or config.granularity
    q_out, d_out = _pair_embeddings(params, config, batch, gran.layers,
                                    training=training, dropout_rng=dropout_rng)
    per_pair: dict[tuple[int, int], float] = {}
    total: Tensor | None = None
    for l in gran.layers:
        for d in gran.dims:
            q_emb = enc.pool(q_out.tapped_states[l], batch.query_mask, d)
            d_emb = enc.pool(d_out.tapped_states[l], batch.doc_mask, d)
            cell = tiled_contrastive_loss(q_emb, d_emb, tau, tile)
            per_pair[(l, d)] = float(cell)
            total = cell if total is None else T.add(total, cell)
    return LossReport(per_pair=per_pair, total=float(total), node=total)


# ---------------------------------------------------------------------------
# Matryoshka self-distillation
# ---------------------------------------------------------------------------


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    # mirrors T.log_softmax_rows exactly so identical logits give identical bits
    m = x.max(axis=-1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))


def distill_loss(
    params: Parameters,
    config: ModelConfig,
    batch: MlmBatch,
    plan: DistillPlan,
    granularity: GranularitySet | None = None,
    teacher_params: Parameters | None = None,
    *,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> LossReport:
    """Multigranular MLM total plus lambda_d times the summed KL terms.

    For each (teacher, student) pair, the KL of the student's token
    distribution from the teacher's is taken at the masked positions (mean
    over them), with the student distribution first and no gradient flowing
    into the teacher branch. Distributions are
    softmax(h[:, :d] @ W[:d, :] / tau_d) -- the shared head without its
    bias. ``teacher_params``, when given, sources the teacher distributions
    from a frozen parameter copy instead of the live weights.
    """
    gran = granularity or config.granularity
    grid = set(gran.grid)
    for teacher, student in plan.pairs:
        for cell in (tuple(teacher), tuple(student)):
            if cell[1] > config.hidden:
                raise ConfigError(f"distillation cell {cell} has dim > hidden={config.hidden}")
            if cell not in grid:
                raise ConfigError(f"distillation cell {cell} is outside the granularity grid")
    _validate_mlm_batch(batch)

    out = enc.forward(params, config, batch.tokens, batch.attn_mask,
                      taps=gran.layers, training=training, dropout_rng=dropout_rng)
    masked_by_layer = {l: _gather_masked(out.tapped_states[l], batch.mask_positions)
                       for l in gran.layers}
    targets = batch.labels.reshape(-1)[np.flatnonzero(batch.mask_positions.reshape(-1))]
    all_true = np.ones(targets.shape[0], dtype=bool)

    per_pair: dict[tuple[int, int], float] = {}
    total: Tensor | None = None
    for l in gran.layers:
        logits_by_dim = _segmented_head_logits(params, masked_by_layer[l], gran.dims)
        for d in gran.dims:
            cell = T.masked_cross_entropy(logits_by_dim[d], targets, all_true)
            per_pair[(l, d)] = float(cell)
            total = cell if total is None else T.add(total, cell)

    def student_logits(cell: tuple[int, int]) -> Tensor:
        l, d = cell
        return T.scale(T.matmul(T.slice_last(masked_by_layer[l], 0, d),
                                T.slice_rows(params.mlm_head_w, 0, d)), 1.0 / plan.tau_d)

    teacher_masked = masked_by_layer
    teacher_w = params.mlm_head_w
    if teacher_params is not None:
        with T.no_grad():
            t_out = enc.forward(teacher_params, config, batch.tokens, batch.attn_mask,
                                taps=gran.layers)
            teacher_masked = {l: _gather_masked(t_out.tapped_states[l], batch.mask_positions)
                              for l in gran.layers}
            teacher_w = teacher_params.mlm_head_w

    def teacher_log_probs(cell: tuple[int, int]) -> np.ndarray:
        # mirrors student_logits operation-for-operation so an identical
        # teacher/student computation yields bit-identical log-probabilities
        l, d = cell
        h = np.ascontiguousarray(teacher_masked[l].data[..., :d])
        w = np.ascontiguousarray(teacher_w.data[:d, :])
        z = (h @ w) * h.dtype.type(1.0 / plan.tau_d)
        return np.maximum(_log_softmax_np(z), np.log(KL_FLOOR))

    aux_value = 0.0
    if plan.pairs and plan.lambda_d != 0.0:
        n_rows = targets.shape[0]
        aux: Tensor | None = None
        for teacher, student in plan.pairs:
            log_teacher = teacher_log_probs(tuple(teacher))
            zs = student_logits(tuple(student))
            p_s = T.softmax_rows(zs)
            log_p_s = T.log_softmax_rows(zs)
            gap = T.add(log_p_s, Tensor(-log_teacher))
            term = T.scale(T.tsum(T.mul(p_s, gap)), 1.0 / n_rows)
            aux = term if aux is None else T.add(aux, term)
        aux_value = float(aux)
        total = T.add(total, T.scale(aux, plan.lambda_d))

    return LossReport(per_pair=per_pair, total=float(total), aux=aux_value, node=total)
