# pipeline.py
# Full fusion network: encoders, per-modality alignment, dual interaction,
# decoder; training, sequence fusion, operation counts and ablations

import time
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import mafm
import mdim
import tensor_core as tc
from config_manager import FusionConfig, VARIANTS
from estimators import BlockMatchingEstimator, FlowEstimatorInterface
from flow_motion import binarize_gate, motion_mask
from loss import LossConfig, spatial_loss, temporal_loss, total_loss, validity_masks
from mafm import MafmWeights
from mdim import MdimWeights, attention_split, select_count
from media_io import load_weights, save_weights
from metrics import evaluate, qabf
from synth_data import moving_box
from tensor_core import GradTape, ShapeError, Tensor

logger = logging.getLogger("Pipeline")

MODALITIES = ("ir", "vis")
REPORT_SIZES = ((480, 640), (720, 1280))
STAGES = ("encoder", "mafm", "mdim_join", "static_branch", "attention_projection",
          "attention_interaction", "reconstruct", "decoder")
MOVING_AVERAGE_WINDOW = 50


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared in a fused frame or a training loss"""


def _conv_params(rng: np.random.Generator, c_out: int, c_in: int) -> Tuple[Tensor, Tensor]:
    return (tc.parameter(tc.he_normal(rng, (c_out, c_in, 3, 3), 9 * c_in)),
            tc.parameter(np.zeros(c_out)))


@dataclass
class FusionModel:
    """Named weights of every stage plus the config they were built for"""
    config: FusionConfig
    encoders: Dict[str, "OrderedDict[str, Tensor]"]
    alignment: Dict[str, MafmWeights]
    interaction: MdimWeights
    decoder: "OrderedDict[str, Tensor]"

    @classmethod
    def init(cls, config: FusionConfig, seed: Optional[int] = None) -> "FusionModel":
        """Seeded He initialization; residual paths start at zero"""
        config.validate()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c = config.channels
        encoders = {}
        for modality in MODALITIES:
            w1, b1 = _conv_params(rng, c, 1)
            w2, b2 = _conv_params(rng, c, c)
            encoders[modality] = OrderedDict(conv1_w=w1, conv1_b=b1, conv2_w=w2, conv2_b=b2)
        alignment = {m: MafmWeights.init(rng, c) for m in MODALITIES}
        interaction = MdimWeights.init(rng, c, config.patch)
        w1, b1 = _conv_params(rng, c, c)
        w2, b2 = _conv_params(rng, 1, c)
        decoder = OrderedDict(conv1_w=w1, conv1_b=b1, conv2_w=w2, conv2_b=b2)
        return cls(config, encoders, alignment, interaction, decoder)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for modality in MODALITIES:
            named.update((f"encoder_{modality}.{k}", v) for k, v in self.encoders[modality].items())
        for modality in MODALITIES:
            named.update(self.alignment[modality].named(f"mafm_{modality}"))
        named.update(self.interaction.named("mdim"))
        named.update((f"decoder.{k}", v) for k, v in self.decoder.items())
        return named

    def to_store(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.numpy()) for name, t in self.parameters().items())

    @classmethod
    def from_store(cls, config: FusionConfig, store: Mapping[str, np.ndarray]) -> "FusionModel":
        """Rebuild a model from named arrays; every expected tensor must be present with its shape"""
        template = cls.init(config)
        for name, tensor in template.parameters().items():
            if name not in store:
                raise ShapeError("load_weights", f"missing tensor '{name}'")
            value = np.asarray(store[name])
            if value.shape != tensor.shape:
                raise ShapeError("load_weights", f"tensor '{name}' does not fit the configured model",
                                 stored=value.shape, expected=tensor.shape)
            tensor.data = value.astype(tensor.dtype)
        return template


def save_model(model: FusionModel, path: str) -> None:
    save_weights(path, model.to_store())


def load_model(config: FusionConfig, path: str) -> FusionModel:
    return FusionModel.from_store(config, load_weights(path))


@dataclass
class FrameWindow:
    """Frames t-1, t, t+1 of both modalities and the flows of frame t"""
    ir: Tuple[np.ndarray, np.ndarray, np.ndarray]
    vis: Tuple[np.ndarray, np.ndarray, np.ndarray]
    flow_prev: Optional[np.ndarray] = None
    flow_next: Optional[np.ndarray] = None


def frame_window(ir: Sequence[np.ndarray], vis: Sequence[np.ndarray], t: int,
                 flows: Optional[Dict[str, List[np.ndarray]]] = None, single: bool = False) -> FrameWindow:
    """
    Window around frame t. Sequence ends duplicate the edge frame with zero
    flow; `single` treats every frame as its own neighbours.
    """
    zero = np.zeros(np.shape(ir[t]) + (2,), dtype=np.float32)
    if single:
        return FrameWindow((ir[t],) * 3, (vis[t],) * 3, zero, zero)
    prev_t, next_t = max(t - 1, 0), min(t + 1, len(ir) - 1)
    flow_prev = zero if prev_t == t else (flows["prev"][t] if flows else None)
    flow_next = zero if next_t == t else (flows["next"][t] if flows else None)
    return FrameWindow((ir[prev_t], ir[t], ir[next_t]), (vis[prev_t], vis[t], vis[next_t]), flow_prev, flow_next)


def encode(model: FusionModel, modality: str, frame: np.ndarray) -> Tensor:
    weights = model.encoders[modality]
    x = Tensor(np.asarray(frame)[None])
    with tc.stage("encoder"):
        x = tc.leaky_relu(tc.conv2d(x, weights["conv1_w"], weights["conv1_b"]))
        return tc.leaky_relu(tc.conv2d(x, weights["conv2_w"], weights["conv2_b"]))


def decode(model: FusionModel, features: Tensor) -> Tensor:
    """C×H×W features to an H×W frame in (0, 1)"""
    weights = model.decoder
    _, h, w = features.shape
    with tc.stage("decoder"):
        x = tc.leaky_relu(tc.conv2d(features, weights["conv1_w"], weights["conv1_b"]))
        x = tc.sigmoid(tc.conv2d(x, weights["conv2_w"], weights["conv2_b"]))
    return tc.reshape(x, (h, w))


def forward(model: FusionModel, window: FrameWindow) -> Tensor:
    """
    Fuse frame t: encode both modalities, derive the motion mask and gate,
    align each modality against the other, run the dual interaction and decode.
    The full_sb variant reads no flow: it fuses the frame-t features directly.
    """
    config = model.config
    h, w = np.shape(window.ir[1])
    minimum = 4 * config.patch
    if h < minimum or w < minimum:
        raise ShapeError("forward", f"frames must be at least {minimum}×{minimum} for patch {config.patch}",
                         frame=(h, w))
    if config.variant == "full_sb":
        mask = np.zeros((h, w), dtype=np.float32)
        current = {m: encode(model, m, getattr(window, m)[1]) for m in MODALITIES}
        fused = mdim.mdim_forward(current["ir"], current["vis"], mask, model.interaction, config)
        return decode(model, fused)

    flow_prev, flow_next = window.flow_prev, window.flow_next
    if flow_prev is None or flow_next is None:
        estimator = BlockMatchingEstimator()
        flow_prev = estimator.estimate(window.vis[1], window.vis[0]) if flow_prev is None else flow_prev
        flow_next = estimator.estimate(window.vis[1], window.vis[2]) if flow_next is None else flow_next
    features = {m: [encode(model, m, frame) for frame in getattr(window, m)] for m in MODALITIES}
    mask = motion_mask(flow_prev, flow_next)
    gate = binarize_gate(mask, config.gate_theta)

    aligned = {}
    with tc.stage("mafm"):
        for modality, other in (("ir", "vis"), ("vis", "ir")):
            prev, current, nxt = features[modality]
            aligned[modality] = mafm.mafm_forward(
                prev, current, nxt, features[other][1], flow_prev, flow_next, gate,
                model.alignment[modality], aligned=config.variant != "no_mafm",
            )
    fused = mdim.mdim_forward(aligned["ir"], aligned["vis"], mask, model.interaction, config)
    return decode(model, fused)


def fuse_sequence(model: FusionModel, ir: np.ndarray, vis: np.ndarray,
                  estimator: Optional[FlowEstimatorInterface] = None,
                  jobs: int = 1, single: bool = False) -> np.ndarray:
    """Fuse every frame of aligned T×H×W sequences; frames are independent jobs"""
    if len(ir) != len(vis) or np.shape(ir)[1:] != np.shape(vis)[1:]:
        raise ShapeError("fuse_sequence", "infrared and visible sequences must align",
                         ir=np.shape(ir), vis=np.shape(vis))
    flows = None
    if not single:
        flows = (estimator or BlockMatchingEstimator()).run_pipeline(list(vis))

    def fuse_at(t: int) -> np.ndarray:
        frame = forward(model, frame_window(ir, vis, t, flows, single)).numpy()
        if not np.all(np.isfinite(frame)):
            raise NumericalError(f"non-finite values in fused frame {t}")
        return frame

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        fused = list(pool.map(fuse_at, range(len(ir))))
    logger.info(f"Fused {len(fused)} frames with variant {model.config.variant}")
    return np.stack(fused)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Adam:
    """Adam over tape-populated gradients, updating tensor data in place"""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, lr: float) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[i] / correction1) / (np.sqrt(self.v[i] / correction2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
            p.grad = None


def learning_rate(config: FusionConfig, iteration: int) -> float:
    """Exponential decay from lr to 1% of lr at the final iteration"""
    if config.iters <= 1:
        return config.lr
    return config.lr * 0.01 ** (iteration / (config.iters - 1))


@dataclass
class TrainingSequence:
    ir: np.ndarray
    vis: np.ndarray
    flows: Dict[str, List[np.ndarray]]
    valid_prev: List[Optional[np.ndarray]]
    valid_next: List[Optional[np.ndarray]]


def prepare_sequence(ir: np.ndarray, vis: np.ndarray, estimator: FlowEstimatorInterface,
                     fb_eps: float = 1.0) -> TrainingSequence:
    """Precompute visible-frame flows and forward-backward validity for one sequence"""
    if len(ir) < 3 or len(ir) != len(vis):
        raise ValueError(f"training needs aligned sequences of at least 3 frames, got {len(ir)} and {len(vis)}")
    flows = estimator.run_pipeline(list(vis))
    count = len(vis)
    valid_prev = [None] + [validity_masks(flows["prev"][t], flows["next"][t - 1], fb_eps) for t in range(1, count)]
    valid_next = [validity_masks(flows["next"][t], flows["prev"][t + 1], fb_eps) for t in range(count - 1)] + [None]
    return TrainingSequence(np.asarray(ir), np.asarray(vis), flows, valid_prev, valid_next)


def _crop(array: Optional[np.ndarray], box: Tuple[slice, slice]) -> Optional[np.ndarray]:
    return None if array is None else array[box]


def _sample_loss(model: FusionModel, seq: TrainingSequence, t: int, box: Tuple[slice, slice],
                 loss_config: LossConfig) -> Tuple[Tensor, Tensor, Tensor]:
    ir = [frame[box] for frame in seq.ir]
    vis = [frame[box] for frame in seq.vis]
    flows = {key: [flow[box] for flow in seq.flows[key]] for key in ("prev", "next")}
    fused = {s: forward(model, frame_window(ir, vis, s, flows)) for s in (t - 1, t, t + 1)}
    spatial = spatial_loss(fused[t], ir[t], vis[t], loss_config)
    temporal = temporal_loss(fused[t - 1], fused[t], fused[t + 1],
                             flows["prev"][t], flows["next"][t],
                             _crop(seq.valid_prev[t], box), _crop(seq.valid_next[t], box))
    return total_loss(spatial, temporal, loss_config.gamma), spatial, temporal


def train(config: FusionConfig, sequences: Sequence[Tuple[np.ndarray, np.ndarray]],
          estimator: Optional[FlowEstimatorInterface] = None,
          progress: Optional[Callable[[int, float], None]] = None) -> Tuple[FusionModel, pd.DataFrame]:
    """
    Desk-scale training with random crops and Adam.

    Args:
        config: hyper-parameters; seed fixes initialization and sampling
        sequences: (ir, vis) T×H×W pairs with T >= 3
        estimator: flow source for the temporal term, block matching by default
        progress: optional callback(iteration, loss)

    Returns:
        trained model and the loss curve table
    """
    config.validate()
    if not sequences:
        raise ValueError("training needs at least one sequence")
    loss_config = LossConfig(gamma=config.gamma).validate()
    estimator = estimator or BlockMatchingEstimator()
    prepared = [prepare_sequence(ir, vis, estimator, loss_config.fb_eps) for ir, vis in sequences]
    model = FusionModel.init(config)
    optimizer = Adam(model.parameters().values())
    rng = np.random.default_rng(config.seed)
    log_every = max(1, config.iters // 10)

    rows = []
    for iteration in range(config.iters):
        lr = learning_rate(config, iteration)
        with GradTape() as tape:
            batch_total = Tensor(0.0)
            spatial_sum = temporal_sum = 0.0
            for _ in range(config.batch):
                seq = prepared[int(rng.integers(len(prepared)))]
                count, h, w = seq.vis.shape
                ch, cw = min(config.crop, h), min(config.crop, w)
                t = int(rng.integers(1, count - 1))
                y = int(rng.integers(0, h - ch + 1))
                x = int(rng.integers(0, w - cw + 1))
                box = (slice(y, y + ch), slice(x, x + cw))
                sample_total, spatial, temporal = _sample_loss(model, seq, t, box, loss_config)
                batch_total = tc.add(batch_total, sample_total)
                spatial_sum += spatial.item()
                temporal_sum += temporal.item()
            loss = tc.mul(batch_total, 1.0 / config.batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss at iteration {iteration}")
        tc.backward(tape, loss)
        optimizer.step(lr)
        rows.append({"iteration": iteration, "loss": value, "spatial": spatial_sum / config.batch,
                     "temporal": temporal_sum / config.batch, "lr": lr})
        if progress is not None:
            progress(iteration, value)
        if iteration % log_every == 0 or iteration == config.iters - 1:
            logger.info(f"iter {iteration}/{config.iters} loss {value:.5f} lr {lr:.2e}")

    curve = pd.DataFrame(rows, columns=["iteration", "loss", "spatial", "temporal", "lr"])
    curve["moving_avg"] = curve["loss"].rolling(MOVING_AVERAGE_WINDOW, min_periods=1).mean()
    return model, curve


# ---------------------------------------------------------------------------
# Operation and parameter counts
# ---------------------------------------------------------------------------

def patch_grid(config: FusionConfig, height: int, width: int) -> Tuple[int, int]:
    """Patch count N and selected count k for a frame size"""
    p = config.patch
    n = (-(-height // p)) * (-(-width // p))
    if config.variant in ("full_db", "dense_attention"):
        return n, n
    return n, select_count(n, config.tau, config.k_max)


def stage_macs(config: FusionConfig, height: int, width: int) -> "OrderedDict[str, int]":
    """Analytic multiply-adds of one forward pass, per stage"""
    hw = height * width
    c = config.channels
    n, k = patch_grid(config, height, width)
    macs: "OrderedDict[str, int]" = OrderedDict()
    static_only = config.variant == "full_sb"
    macs["encoder"] = (2 if static_only else 6) * hw * (9 * c + 9 * c * c)
    macs["mafm"] = 0 if config.variant in ("no_mafm", "full_sb") else 2 * hw * ((4 * c + 4) * c + 9 * c + 2 * c)
    macs["mdim_join"] = hw * 2 * c * c
    macs["static_branch"] = hw * (9 * c + c * c) + 9 * hw * c * c
    if static_only:
        macs["attention_projection"] = macs["attention_interaction"] = macs["reconstruct"] = 0
    else:
        macs.update(attention_split(n, k, config.token_dim, config.kv_mode))
        macs["reconstruct"] = 9 * hw * c * c
    macs["decoder"] = hw * (9 * c * c + 9 * c)
    return macs


def parameter_counts(config: FusionConfig) -> "OrderedDict[str, int]":
    c = config.channels
    counts: "OrderedDict[str, int]" = OrderedDict((stage, 0) for stage in STAGES)
    counts["encoder"] = 2 * ((9 * c + c) + (9 * c * c + c))
    if config.variant not in ("no_mafm", "full_sb"):
        counts["mafm"] = 2 * sum(mafm.parameter_count(c).values())
    for stage, value in mdim.parameter_count(c, config.patch).items():
        counts[stage] = value
    if config.variant == "full_sb":
        counts["attention_projection"] = counts["reconstruct"] = 0
    counts["decoder"] = (9 * c * c + c) + (9 * c + 1)
    return counts


def flops_report(config: FusionConfig, sizes: Sequence[Tuple[int, int]] = REPORT_SIZES) -> pd.DataFrame:
    """
    Per-stage parameters and multiply-adds at each (height, width), plus
    the growth factor from the first size to the last
    """
    params = parameter_counts(config)
    per_size = [stage_macs(config, h, w) for h, w in sizes]
    columns = [f"macs_{w}x{h}" for h, w in sizes]
    rows = []
    for stage in STAGES:
        row = {"stage": stage, "params": params[stage]}
        for column, macs in zip(columns, per_size):
            row[column] = macs[stage]
        rows.append(row)
    total = {"stage": "total", "params": sum(params.values())}
    for column, macs in zip(columns, per_size):
        total[column] = sum(macs.values())
    rows.append(total)
    table = pd.DataFrame(rows, columns=["stage", "params"] + columns)
    first, last = table[columns[0]], table[columns[-1]]
    table["growth"] = np.where(first > 0, last / first.where(first > 0, 1), 0.0)
    return table


def count_forward(model: FusionModel, window: FrameWindow) -> "OrderedDict[str, int]":
    """Instrumented multiply-adds of one forward pass, per stage"""
    with tc.OpCounter() as counter:
        forward(model, window)
    return counter.totals


# ---------------------------------------------------------------------------
# Attention benchmark
# ---------------------------------------------------------------------------

def time_attention(n: int, k: int, d: int, kv_mode: str = "all_patches", seed: int = 0,
                   repeats: int = 3) -> float:
    """Best-of wall time of one attention pass over random tokens"""
    rng = np.random.default_rng(seed)
    tokens = Tensor(rng.standard_normal((n, d)))
    wq, wk, wv = (Tensor(rng.normal(0.0, d ** -0.5, (d, d))) for _ in range(3))
    t_global = mdim.global_token(tokens)
    queries = tc.gather_rows(tokens, np.arange(k))
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        mdim.sparse_attention(queries, tokens, t_global, wq, wk, wv, kv_mode)
        best = min(best, time.perf_counter() - start)
    return best


def bench_table(n_list: Sequence[int], tau: float, d: int, k_max: int,
                kv_mode: str = "all_patches", config: Optional[FusionConfig] = None,
                timing: bool = False) -> pd.DataFrame:
    """
    Long-format benchmark rows (section, item, n, k, d, value): dense and
    sparse attention multiply-adds per N, and the pipeline operation report
    """
    rows = []
    for n in n_list:
        k = select_count(n, tau, k_max)
        dense = mdim.dense_attention_flops(n, d)
        sparse = mdim.attention_flops(n, k, d, kv_mode)
        rows.append({"section": "attention", "item": "dense_macs", "n": n, "k": n, "d": d, "value": dense})
        rows.append({"section": "attention", "item": "sparse_macs", "n": n, "k": k, "d": d, "value": sparse})
        rows.append({"section": "attention", "item": "sparse_over_dense", "n": n, "k": k, "d": d,
                     "value": sparse / dense})
        if timing:
            dense_time = time_attention(n, n, d, "all_patches")
            sparse_time = time_attention(n, k, d, kv_mode)
            rows.append({"section": "timing", "item": "dense_seconds", "n": n, "k": n, "d": d, "value": dense_time})
            rows.append({"section": "timing", "item": "sparse_seconds", "n": n, "k": k, "d": d, "value": sparse_time})
            rows.append({"section": "timing", "item": "speedup", "n": n, "k": k, "d": d,
                         "value": dense_time / max(sparse_time, 1e-12)})
    if config is not None:
        report = flops_report(config)
        sizes = [c for c in report.columns if c.startswith("macs_")]
        for _, row in report.iterrows():
            for column in sizes + ["growth"]:
                rows.append({"section": "pipeline", "item": f"{row['stage']}:{column}", "n": 0,
                             "k": 0, "d": config.token_dim, "value": row[column]})
    return pd.DataFrame(rows, columns=["section", "item", "n", "k", "d", "value"])


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ["variant", "qabf", "qabf_motion", "piella_qs", "ssim", "ms2r_proxy", "macs"]


def ablate(config: FusionConfig, variants: Sequence[str], sequences: Sequence[Tuple[np.ndarray, np.ndarray]],
           masks: Optional[np.ndarray] = None, estimator: Optional[FlowEstimatorInterface] = None) -> pd.DataFrame:
    """
    Train each variant with identical seed and iterations, fuse the first
    sequence and score it. qabf_motion restricts Q^AB/F to the bounding box
    of the ground-truth motion mask when masks are given.
    """
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant '{variant}', expected one of {', '.join(VARIANTS)}")
    estimator = estimator or BlockMatchingEstimator()
    ir, vis = sequences[0]
    rows = []
    for variant in variants:
        variant_config = replace(config, variant=variant).validate()
        logger.info(f"Ablation: training variant {variant}")
        model, _ = train(variant_config, sequences, estimator)
        fused = fuse_sequence(model, ir, vis, estimator)
        scores = evaluate(fused, ir, vis, estimator)
        means = scores.means()
        qabf_motion = float("nan")
        if masks is not None and masks.any():
            box = moving_box(masks)
            qabf_motion = float(np.mean([qabf(a[box], b[box], f[box]) for a, b, f in zip(ir, vis, fused)]))
        rows.append({
            "variant": variant,
            "qabf": means["qabf"],
            "qabf_motion": qabf_motion,
            "piella_qs": means["piella_qs"],
            "ssim": means["ssim"],
            "ms2r_proxy": scores.sequence.get("ms2r_proxy", float("nan")),
            "macs": sum(stage_macs(variant_config, *ir.shape[1:]).values()),
        })
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)
