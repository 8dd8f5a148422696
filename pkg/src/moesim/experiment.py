"""End-to-end experiment pipeline: workload, simulation, report, verification.

A run builds one gating decision per MoE layer per frame -- either by
actually executing the model on seeded synthetic images, or (for large
calibrations where the numerics don't matter) by drawing routing logits
directly from a seeded stream -- then feeds identical decisions to every
requested execution strategy and assembles a JSON-stable report.

Reports are rendered with sorted keys and carry no timestamps, so the
same config always produces byte-identical report text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .initialization import keyed_generator, seeded_init
from .moe import (
    DEFAULT_BALANCING_WEIGHT,
    GatingDecision,
    balancing_loss,
    moe_forward_reference,
    top_k_gate,
)
from .scheduler import (
    FrameRouting,
    SimReport,
    Workload,
    build_queues,
    execute_reordered,
    memory_account,
    simulate_model,
    trace_to_csv,
)
from .vit import (
    ModelConfig,
    ModelParams,
    dense_mlp_per_token_macs,
    flop_count,
    model_forward,
    moe_expert_per_token_macs,
)

REPORT_SCHEMA = "moesim-report-v1"


def frame_image(seed: int, frame: int, config: ModelConfig) -> np.ndarray:
    """Synthetic input image for a frame, a pure function of (seed, frame)."""
    gen = keyed_generator(seed, f"image.frame{frame:04d}")
    shape = (config.image_h, config.image_w, config.channels)
    return gen.uniform(-1.0, 1.0, shape).astype(np.float32)


def synthesize_decision(
    seed: int, frame: int, layer: int, config: ModelConfig, distribution: str, alpha: float
) -> GatingDecision:
    """Draw routing logits directly instead of running the model.

    ``uniform`` makes every expert equally likely; ``skewed`` biases
    popularity toward low expert indices with a power-law of exponent
    ``alpha`` (Gumbel noise turns popularity into per-token choices).
    """
    gen = keyed_generator(seed, f"routing.frame{frame:04d}.layer{layer:02d}")
    t, n = config.tokens, config.expert_count
    if distribution == "uniform":
        logits = gen.standard_normal((t, n))
    else:
        popularity = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), alpha)
        logits = np.log(popularity) + gen.gumbel(size=(t, n))
    return top_k_gate(logits.astype(np.float32), config.top_k)


def build_workload(config: ExperimentConfig) -> tuple[Workload, ModelParams | None]:
    """Produce per-frame routing decisions; params are None in synthetic mode."""
    model_cfg = config.to_model_config()
    seed = config.workload.seed
    synth = config.workload.synthetic_routing
    frames = []
    params = None if synth else seeded_init(model_cfg, seed)
    for f in range(config.workload.num_frames):
        task = config.task_for_frame(f)
        if synth:
            decisions = [
                synthesize_decision(seed, f, l, model_cfg, synth.distribution, synth.alpha)
                for l in range(model_cfg.n_moe_blocks)
            ]
        else:
            result = model_forward(model_cfg, params, frame_image(seed, f, model_cfg), task)
            decisions = result.decisions
        frames.append(FrameRouting(task_id=task, decisions=decisions))
    return Workload(frames=frames), params


def _routing_statistics(model_cfg: ModelConfig, workload: Workload) -> dict:
    histograms = [[0] * model_cfg.expert_count for _ in range(model_cfg.n_moe_blocks)]
    losses = []
    for frame in workload.frames:
        frame_losses = []
        for l, decision in enumerate(frame.decisions):
            counts = np.bincount(decision.expert_ids.ravel(), minlength=model_cfg.expert_count)
            for e, n in enumerate(counts.tolist()):
                histograms[l][e] += n
            frame_losses.append(balancing_loss(decision))
        losses.append(frame_losses)
    flat = [x for fr in losses for x in fr]
    return {
        "balancing_loss": {
            "weight": DEFAULT_BALANCING_WEIGHT,
            "per_frame_layer": losses,
            "mean": sum(flat) / len(flat) if flat else 0.0,
        },
        "histograms": histograms,
    }


@dataclass(frozen=True)
class RunResult:
    report: dict
    trace_csv: str


def trace_strategy(strategies: list[str]) -> str:
    """Which strategy's trace goes in the CSV: reordered when present."""
    return "reordered" if "reordered" in strategies else strategies[0]


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Simulate every requested strategy on one shared workload."""
    model_cfg = config.to_model_config()
    cost = config.to_cost_model()
    workload, _ = build_workload(config)
    reports: dict[str, SimReport] = {
        s: simulate_model(model_cfg, workload, cost, s) for s in config.strategies
    }
    flops = flop_count(model_cfg)
    report = {
        "schema": REPORT_SCHEMA,
        "config": config.model_dump(mode="json"),
        "flops": {
            **flops.to_dict(),
            "per_token_macs": {
                "dense_mlp": dense_mlp_per_token_macs(model_cfg),
                "moe_experts": moe_expert_per_token_macs(model_cfg),
            },
        },
        "memory_bytes": memory_account(model_cfg, cost),
        "strategies": {name: rep.to_dict() for name, rep in reports.items()},
        "routing": _routing_statistics(model_cfg, workload),
    }
    csv = trace_to_csv(reports[trace_strategy(config.strategies)].trace)
    return RunResult(report=report, trace_csv=csv)


def render_report_json(report: dict) -> str:
    """Canonical report text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def verify_equivalence(config: ExperimentConfig, perturb_accumulation: bool = False) -> dict:
    """Compare reference and reordered execution on every MoE layer, bitwise.

    Always runs the numeric pipeline (synthetic routing has no tensors to
    compare).  ``perturb_accumulation`` reverses the expert execution
    order, which is expected to break equality -- a control showing the
    check can fail.
    """
    model_cfg = config.to_model_config()
    seed = config.workload.seed
    params = seeded_init(model_cfg, seed)
    equivalent = True
    max_diff = 0.0
    layers_checked = 0
    for f in range(config.workload.num_frames):
        image = frame_image(seed, f, model_cfg)
        result = model_forward(model_cfg, params, image, config.task_for_frame(f))
        for rec in result.moe_records:
            layer = params.blocks[rec.block_index].moe
            reference = moe_forward_reference(layer, rec.inputs, rec.decision)
            order = None
            if perturb_accumulation:
                order = list(reversed(build_queues(rec.decision).active_experts))
            reordered = execute_reordered(layer, rec.inputs, rec.decision, expert_order=order)
            if not np.array_equal(reference, reordered):
                equivalent = False
                diff = np.abs(reference.astype(np.float64) - reordered.astype(np.float64))
                max_diff = max(max_diff, float(diff.max()))
            layers_checked += 1
    return {
        "equivalent": equivalent,
        "max_abs_diff": max_diff,
        "layers_checked": layers_checked,
        "frames_checked": config.workload.num_frames,
    }


def flop_report(config: ExperimentConfig) -> dict:
    model_cfg = config.to_model_config()
    dense = dense_mlp_per_token_macs(model_cfg)
    moe = moe_expert_per_token_macs(model_cfg)
    return {
        **flop_count(model_cfg).to_dict(),
        "per_token_macs": {"dense_mlp": dense, "moe_experts": moe, "matched": dense == moe},
    }


def report_table(report: dict) -> str:
    """Fixed-width text summary of a report, with ratios against reordered."""
    strategies = report["strategies"]
    header = f"{'strategy':<10}{'latency_ms':>12}{'energy_mJ':>12}{'peak_MiB':>10}{'loads':>8}  feasible"
    lines = [header, "-" * len(header)]
    for name in ("naive", "cached", "reordered"):
        if name not in strategies:
            continue
        s = strategies[name]
        lines.append(
            f"{name:<10}"
            f"{s['latency_s'] * 1e3:>12.3f}"
            f"{s['energy_j'] * 1e3:>12.3f}"
            f"{s['peak_onchip_bytes'] / 2**20:>10.3f}"
            f"{s['load_events']:>8}"
            f"  {'yes' if s['feasible'] else 'NO'}"
        )
    if "reordered" in strategies:
        base = strategies["reordered"]
        for name in ("naive", "cached"):
            if name not in strategies:
                continue
            s = strategies[name]
            lat = s["latency_s"] / base["latency_s"] if base["latency_s"] else float("inf")
            nrg = s["energy_j"] / base["energy_j"] if base["energy_j"] else float("inf")
            mem = s["peak_onchip_bytes"] / base["peak_onchip_bytes"]
            lines.append(
                f"{name} vs reordered: latency {lat:.2f}x, energy {nrg:.2f}x, memory {mem:.2f}x"
            )
    total = report.get("flops", {}).get("flops_total")
    if total is not None:
        lines.append(f"model flops/frame: {total / 1e9:.3f} GFLOP")
    return "\n".join(lines) + "\n"
