"""Command-line entry point: ``longattn <command> --config <path> [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import zlib
from dataclasses import dataclass, field

import numpy as np

from longattn import __version__
from longattn.attention import (
    AttentionInput,
    dense_entries,
    flop_estimate,
    full_attention,
    random_input,
    rope_apply,
)
from longattn.config import RunConfig, load_config, parse_config
from longattn.dca import (
    YarnScale,
    dca_attention,
    dca_position_matrix,
    yarn_temperature,
)
from longattn.engine_sim import (
    dcpp_schedule,
    discretization_bound,
    fixed_schedule,
    pipeline_simulate,
    tag_simulate,
)
from longattn.errors import LongAttnError
from longattn.forge import emit_jsonl, forge_corpus, verify_sample
from longattn.planted import planted_input
from longattn.refine import attention_recall, offline_search, refine_plan
from longattn.vertical_slash import (
    PositionMode,
    SparsityPlan,
    chunked_prefill,
    admitted_entries,
    density,
    select_for_input,
    sparse_attention,
)

COMMANDS = ("attn-check", "extrapolate", "sparsity", "refine", "engine-sim", "forge")
OUT_ENV = "LONGATTN_OUT"


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per module, derived from the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def module_seed(seed: int, name: str) -> int:
    return int(module_rng(seed, name).integers(0, 2**31))


@dataclass
class Report:
    """Collects metrics with declared pass/fail assertions and writes report files."""

    cfg: RunConfig
    out_dir: str
    rows: list[tuple[str, float, str, bool | None]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def metric(self, name: str, value: float, bound: str = "", ok: bool | None = None):
        self.rows.append((name, float(value), bound, ok))
        self.summary[name] = float(value)

    @property
    def failures(self) -> list[str]:
        return [name for name, _, _, ok in self.rows if ok is False]

    def _stamp(self) -> dict:
        return {"configHash": self.cfg.config_hash(), "version": __version__}

    def write_csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        stamp = self._stamp()
        buf.write(f"# config_hash={stamp['configHash']} version={stamp['version']}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self._write(name, buf.getvalue())

    def write_text(self, name: str, text: str) -> None:
        self._write(name, text)

    def write_json(self, name: str, doc: dict) -> None:
        self._write(name, json.dumps({**self._stamp(), **doc}, indent=2, sort_keys=True) + "\n")

    def _write(self, name: str, text: str) -> None:
        with open(os.path.join(self.out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    def finish(self, command: str) -> int:
        self.write_csv(
            f"{command}_metrics.csv",
            ["metric", "value", "bound", "pass"],
            [
                (name, repr(value), bound, "" if ok is None else ("true" if ok else "false"))
                for name, value, bound, ok in self.rows
            ],
        )
        self.write_json(
            f"{command}_summary.json",
            {"command": command, "metrics": self.summary, "failures": self.failures},
        )
        return 0 if not self.failures else 1


def cmd_attn_check(cfg: RunConfig, rep: Report):
    a = cfg.attention
    seed = module_seed(cfg.seed, "attention")
    inp = random_input(a.n, a.dim, seed, rope_base=a.rope_base)
    idx = np.arange(a.n)
    rope = full_attention(inp)
    override = full_attention(inp, rel_override=idx[:, None] - idx[None, :])
    diff = float(np.max(np.abs(rope.output - override.output)))
    rep.metric("max_abs_diff", diff, "<= 1e-9", diff <= 1e-9)

    qr = rope_apply(inp.q, inp.positions_q, a.rope_base)
    kr = rope_apply(inp.k, inp.positions_k, a.rope_base)
    logits = qr @ kr.T / np.sqrt(a.dim)
    direct = np.array([np.exp(logits[i, : i + 1]).sum() for i in range(a.n)])
    lse_err = float(np.max(np.abs(np.exp(rope.lse) - direct) / direct))
    rep.metric("lse_rel_err", lse_err, "<= 1e-9", lse_err <= 1e-9)

    norm_err = float(np.max(np.abs(np.linalg.norm(qr, axis=1) - np.linalg.norm(inp.q, axis=1))))
    rep.metric("rope_norm_err", norm_err, "<= 1e-9", norm_err <= 1e-9)

    cut = a.n // 2
    rng = module_rng(cfg.seed, "attention-perturb")
    q, k, v = inp.q.copy(), inp.k.copy(), inp.v.copy()
    for m in (q, k, v):
        m[cut + 1 :] += rng.standard_normal(m[cut + 1 :].shape)
    bumped = full_attention(AttentionInput(q, k, v, idx, idx, rope_base=a.rope_base))
    causal = float(np.max(np.abs(bumped.output[: cut + 1] - rope.output[: cut + 1])))
    rep.metric("causality_max_change", causal, "== 0", causal == 0.0)


def cmd_extrapolate(cfg: RunConfig, rep: Report):
    chunk = cfg.chunk.to_chunk()
    n = cfg.attention.n
    mat = dca_position_matrix(n, chunk)
    i, j = np.tril_indices(n)
    rel = mat[i, j]
    rep.metric(
        "max_position", rel.max(), f"<= {chunk.train_len - 1}", rel.max() <= chunk.train_len - 1
    )
    rep.metric("min_position", rel.min(), ">= 0", rel.min() >= 0)
    local = (i - j) <= chunk.local_window
    violations = int(np.sum(rel[local] != (i - j)[local]))
    rep.metric("local_exactness_violations", violations, "== 0", violations == 0)

    short = min(n, chunk.chunk_size)
    inp = random_input(short, cfg.attention.dim, module_seed(cfg.seed, "dca"))
    same = dca_attention(inp, chunk, YarnScale(1.0))
    ref = full_attention(inp)
    bitwise = bool(np.array_equal(same.output, ref.output) and np.array_equal(same.lse, ref.lse))
    rep.metric("short_input_noop", float(bitwise), "== 1", bitwise)
    rep.metric("yarn_temperature", yarn_temperature(cfg.yarn.scale_factor))
    if n <= 512:
        rep.write_csv("positions.csv", [f"k{c}" for c in range(n)], mat.tolist())


def cmd_sparsity(cfg: RunConfig, rep: Report):
    sp = cfg.sparsity
    inp = planted_input(
        sp.n,
        sp.dim,
        columns=sp.planted_columns,
        slashes=sp.planted_slashes,
        signal=sp.signal,
        seed=module_seed(cfg.seed, "vertical-slash"),
    )
    budget = sp.budget.to_budget()
    chunk = None if sp.position_mode == PositionMode.STANDARD else cfg.chunk.to_chunk()
    crit = select_for_input(
        inp,
        budget,
        sp.last_q,
        sp.position_mode,
        chunk,
        forced=sp.forced,
        slash_reduce=sp.slash_reduce,
    )
    recovered = set(sp.planted_columns) <= set(crit.verticals) and set(sp.planted_slashes) <= set(
        crit.slashes
    )
    rep.metric("planted_recovered", float(recovered), "== 1", recovered)
    counted = int(crit.mask(np.arange(sp.n)).sum())
    rep.metric("admitted_entries", counted)
    formula_ok = counted == admitted_entries(crit)
    rep.metric("density_formula_matches_count", float(formula_ok), "== 1", formula_ok)
    rho = density(crit)
    rep.metric("density", rho)
    ratio = flop_estimate(sp.n, sp.dim, counted) / flop_estimate(sp.n, sp.dim, dense_entries(sp.n))
    rep.metric("flop_ratio", ratio)
    full = full_attention(inp)
    recall = attention_recall(sparse_attention(inp, crit).lse, full.lse).aggregate
    rep.metric("recall", recall, f">= {sp.min_recall}", recall >= sp.min_recall)
    rep.write_text("critical_set.json", crit.to_json() + "\n")

    chunked, state = chunked_prefill(
        inp,
        sp.chunk_len,
        sp.last_q,
        budget,
        "sparse",
        sp.position_mode,
        chunk,
        forced=sp.forced,
        slash_reduce=sp.slash_reduce,
    )
    rep.metric("chunked_chunks", len(state.critical_sets))
    rep.metric("chunked_density", state.computed_entries / dense_entries(sp.n))
    rep.metric("chunked_recall", attention_recall(chunked.lse, full.lse).aggregate)


def _calibration(cfg: RunConfig, length: int, name: str):
    cal = cfg.refine.calibration
    rng = module_rng(cfg.seed, name)
    calib = {}
    for layer in range(cal.layers):
        for head in range(cal.heads):
            samples = []
            for _ in range(cal.samples):
                cols = rng.choice(
                    np.arange(1, length), size=min(cal.columns, length - 1), replace=False
                )
                sl = rng.choice(
                    np.arange(1, length), size=min(cal.slashes, length - 1), replace=False
                )
                samples.append(
                    planted_input(
                        length,
                        cal.dim,
                        columns=cols.tolist(),
                        slashes=sl.tolist(),
                        seed=int(rng.integers(2**31)),
                    )
                )
            calib[(layer, head)] = samples
    return calib


def cmd_refine(cfg: RunConfig, rep: Report):
    r = cfg.refine
    cal = r.calibration
    rcfg = r.to_refine()
    long_calib = _calibration(cfg, cal.length, "sparsity-refine")
    plan = SparsityPlan.uniform(cal.layers, cal.heads, r.initial_budget.to_budget())
    if r.grid:
        short_calib = _calibration(cfg, cal.short_length, "sparsity-search")
        if any(short_calib.values()):
            plan = offline_search(
                short_calib,
                [b.to_budget() for b in r.grid],
                r.threshold,
                last_q=min(r.last_q, cal.short_length),
                forced=r.forced,
            )
    refined, report = refine_plan(long_calib, plan, rcfg)
    monotone = all(refined[key].dominates(plan[key]) for key in plan)
    rep.metric("budgets_monotone", float(monotone), "== 1", monotone)
    settled = all(
        h.final_recall >= r.threshold or h.hit_cap or h.rounds == r.max_rounds for h in report.heads
    )
    rep.metric("threshold_or_cap", float(settled), "== 1", settled)
    rep.metric("min_final_recall", min(h.final_recall for h in report.heads))
    rep.metric("total_rounds", sum(h.rounds for h in report.heads))
    rep.write_text("plan_initial.json", plan.to_json() + "\n")
    rep.write_text("plan.json", refined.to_json() + "\n")
    lines = report.to_csv().splitlines()
    rep.write_csv("refine_report.csv", lines[0].split(","), [ln.split(",") for ln in lines[1:]])


def cmd_engine_sim(cfg: RunConfig, rep: Report):
    model = cfg.cost_model.to_model()
    p = cfg.pipeline
    fixed = fixed_schedule(p.length, p.chunks)
    dyn = dcpp_schedule(p.length, p.chunks, model)
    tf = pipeline_simulate(fixed, p.stages, model)
    td = pipeline_simulate(dyn, p.stages, model)
    rep.metric("makespan_fixed", tf.makespan)
    rep.metric("makespan_dcpp", td.makespan, "<= makespan_fixed", td.makespan <= tf.makespan)
    rep.metric("bubble_ratio_fixed", tf.bubble_ratio)
    rep.metric("bubble_ratio_dcpp", td.bubble_ratio)
    costs = dyn.costs(model)
    spread = max(costs) - min(costs)
    bound = discretization_bound(model, dyn)
    rep.metric("dcpp_cost_spread", spread, f"<= {bound!r}", spread <= bound)

    timing = cfg.engine.to_timing()
    serial = tag_simulate(timing, "serial")
    asyn = tag_simulate(timing, "async")
    expected_serial = sum(timing.stage_times) + 2 * timing.hop_latency
    rep.metric(
        "serial_period",
        serial.steady_period,
        f"== {expected_serial!r}",
        serial.steady_period == expected_serial,
    )
    expected_async = max(timing.stage_times)
    rep.metric(
        "async_period",
        asyn.steady_period,
        f"== {expected_async!r}",
        timing.steps < 2 or asyn.steady_period == expected_async,
    )
    rep.metric("speedup", asyn.throughput / serial.throughput)
    rep.write_text("schedule.json", json.dumps({"fixed": fixed.sizes, "dcpp": dyn.sizes}) + "\n")
    for name, trace in (
        ("fixed", tf),
        ("dcpp", td),
        ("serial", serial.trace),
        ("async", asyn.trace),
    ):
        rows = [(e.stage, e.item, repr(e.start), repr(e.end)) for e in trace.events]
        rep.write_csv(f"trace_{name}.csv", ["stage", "chunk", "start", "end"], rows)


def cmd_forge(cfg: RunConfig, rep: Report):
    f = cfg.forge
    samples = forge_corpus(
        f.count,
        module_seed(cfg.seed, "data-forge"),
        f.kinds,
        max_len=f.max_len,
        long_fraction=f.long_fraction,
    )
    written = emit_jsonl(samples, os.path.join(rep.out_dir, "corpus.jsonl"))
    rep.metric("samples_written", written, f"== {f.count}", written == f.count)
    verified = sum(verify_sample(s) for s in samples)
    rep.metric("samples_verified", verified, f"== {f.count}", verified == f.count)


HANDLERS = {
    "attn-check": cmd_attn_check,
    "extrapolate": cmd_extrapolate,
    "sparsity": cmd_sparsity,
    "refine": cmd_refine,
    "engine-sim": cmd_engine_sim,
    "forge": cmd_forge,
}


def _error(err: LongAttnError) -> int:
    doc = {"error": err.kind, "message": str(err)}
    if getattr(err, "field", None):
        doc["field"] = err.field
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return 2


def run(command: str, cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    rep = Report(cfg, out_dir)
    try:
        HANDLERS[command](cfg, rep)
    except LongAttnError as err:
        return _error(err)
    status = rep.finish(command)
    if status:
        print(
            json.dumps({"error": "assertion_failed", "metrics": rep.failures}, sort_keys=True),
            file=sys.stderr,
        )
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="longattn", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and outDir)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = parse_config({**cfg.model_dump(mode="json", by_alias=True), "seed": args.seed})
    except LongAttnError as err:
        return _error(err)
    out_dir = args.out or os.environ.get(OUT_ENV) or cfg.out_dir
    return run(args.command, cfg, out_dir)


if __name__ == "__main__":
    sys.exit(main())
