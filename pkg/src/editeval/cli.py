"""``editeval`` command line.

Every command reads a YAML config (optional) plus flag overrides, writes into
the run directory (``output_dir``) and exits 0 on success, 1 when some cases
failed, 2 on configuration or input errors.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import click

from . import __version__
from .config import FIELD_TYPES, ConfigError, RunConfig, load_config
from .core import CoherenceVerdict, EditCase, Image, SchemaError, load_cases
from .datagen import (
    OpBalance,
    build_stage2_manifest,
    label_pair,
    load_annotations,
    mine_pairs,
    plan_augmentation,
    png_mask_loader,
    validate_stage2_manifest,
)
from .detmetrics import CLASS_AGNOSTIC, CLASS_AWARE, APReport, coherence_accuracy, evaluate_coherence_ap, evaluate_detection
from .evalcomp import (
    STUDY_ROWS,
    CaseOutcome,
    MaskPolicy,
    PolicyKind,
    clip_i,
    clip_t,
    correlation_study,
    ranking_axes,
)
from .modelgw import (
    CoherenceResult,
    DetectionResult,
    Gateway,
    GatewayConfig,
    GatewayError,
    HttpTransport,
    ResponseCache,
)

log = logging.getLogger("editeval")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class PartialFailure(Exception):
    pass


# --- run directory I/O -------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def file_hash(*paths: str | Path | None) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


class RunContext:
    def __init__(self, cfg: RunConfig, dataset_hash: str | None):
        self.cfg = cfg
        self.dataset_hash = dataset_hash
        self.out = Path(cfg.output_dir)

    def meta(self, kind: str) -> dict[str, Any]:
        return {
            "tool": "editeval",
            "version": __version__,
            "kind": kind,
            "config_hash": self.cfg.config_hash(),
            "dataset_hash": self.dataset_hash,
        }

    def banner(self, kind: str) -> str:
        m = self.meta(kind)
        return f"# editeval {m['version']} {kind} config={m['config_hash']} dataset={m['dataset_hash']}\n"

    def write_run_json(self) -> None:
        body = {
            "tool": "editeval",
            "version": __version__,
            "config": self.cfg.hashed_view(),
            "config_hash": self.cfg.config_hash(),
            "dataset_hash": self.dataset_hash,
        }
        write_atomic(self.out / "run.json", dumps_json(body))

    def write_json(self, name: str, kind: str, body: dict[str, Any]) -> None:
        write_atomic(self.out / name, dumps_json({"_meta": self.meta(kind), **body}))

    def write_jsonl(self, name: str, kind: str, rows: Iterable[dict[str, Any]]) -> None:
        lines = [json.dumps({"_meta": self.meta(kind)}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in rows]
        write_atomic(self.out / name, "\n".join(lines) + "\n")

    def write_text(self, name: str, kind: str, text: str) -> None:
        write_atomic(self.out / name, self.banner(kind) + text)


def dumps_json(body: Any) -> str:
    return json.dumps(body, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def read_jsonl(path: Path) -> tuple[dict[str, Any] | None, list[dict[str, Any]]]:
    if not path.is_file():
        raise SchemaError(path, None, "file not found")
    meta, rows = None, []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except ValueError as exc:
                raise SchemaError(path, lineno, f"invalid JSON: {exc}") from None
            if not isinstance(d, dict):
                raise SchemaError(path, lineno, "expected a JSON object")
            if "_meta" in d:
                meta = d["_meta"]
                continue
            rows.append(d)
    return meta, rows


def load_detections(run: Path) -> dict[str, DetectionResult]:
    path = run / "detections.jsonl"
    _, rows = read_jsonl(path)
    try:
        return {r.case_id: r for r in map(DetectionResult.from_json, rows)}
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(path, None, f"bad detection record: {exc}") from None


def load_verdicts(path: Path) -> dict[tuple[str, int], CoherenceResult]:
    _, rows = read_jsonl(path)
    try:
        return {(r.case_id, r.index): r for r in map(CoherenceResult.from_json, rows)}
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(path, None, f"bad verdict record: {exc}") from None


def outcomes_for(run: Path, key: Callable[[str], str] = lambda c: c) -> tuple[dict[str, CaseOutcome], list[str]]:
    """Detected differences with their verdicts per case; failed cases listed separately."""
    dets = load_detections(run)
    verdicts = load_verdicts(run / "verdicts.jsonl")
    out, failed = {}, []
    for cid, det in sorted(dets.items()):
        if det.report is None:
            failed.append(cid)
            continue
        diffs = det.report.differences
        vs = []
        for i in range(len(diffs)):
            r = verdicts.get((cid, i))
            vs.append(None if r is None else r.verdict)
        out[key(cid)] = CaseOutcome(key(cid), diffs, tuple(vs))
    return out, failed


# --- plumbing shared by commands ---------------------------------------------------


def _option_for(f: dataclasses.Field) -> Callable:
    name = "--" + f.name.replace("_", "-")
    default = getattr(RunConfig(), f.name)
    if isinstance(default, bool):
        return click.option(f"{name}/--no-{f.name.replace('_', '-')}", f.name, default=None, help=f"config: {f.name}")
    typ: Any = str
    if isinstance(default, int):
        typ = int
    elif isinstance(default, float):
        typ = float
    return click.option(name, f.name, type=typ, default=None, help=f"config: {f.name}")


def config_options(fn: Callable) -> Callable:
    for f in reversed(list(FIELD_TYPES.values())):
        fn = _option_for(f)(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override any config key.")(fn)
    fn = click.option("--no-cache", is_flag=True, help="Disable the response cache.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file.")(fn)
    return fn


def resolve_config(kwargs: dict[str, Any]) -> RunConfig:
    overrides = {k: kwargs.pop(k) for k in list(kwargs) if k in FIELD_TYPES}
    for item in kwargs.pop("sets", ()):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    no_cache = kwargs.pop("no_cache", False)
    cfg = load_config(kwargs.pop("config_path", None), overrides)
    if no_cache:
        cfg.cache_dir = None
    return cfg


def command(kind: str) -> Callable:
    """Wrap a command body ``fn(cfg, **rest) -> exit code`` with config resolution and error mapping."""

    def deco(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(**kwargs: Any) -> None:
            try:
                cfg = resolve_config(kwargs)
                code = fn(cfg, **kwargs)
            except (ConfigError, SchemaError, FileNotFoundError) as exc:
                click.echo(f"error: {exc}", err=True)
                sys.exit(EXIT_CONFIG)
            except PartialFailure as exc:
                click.echo(f"warning: {exc}", err=True)
                sys.exit(EXIT_PARTIAL)
            sys.exit(code or EXIT_OK)

        return wrapper

    return deco


def require(value: Any, name: str) -> Any:
    if value in (None, ""):
        raise ConfigError(f"{name} is not configured")
    return value


def dataset_context(cfg: RunConfig) -> tuple[RunContext, list[EditCase]]:
    path = Path(require(cfg.dataset, "dataset"))
    if not path.is_file():
        raise ConfigError(f"dataset {path} not found")
    cases = load_cases(path)
    ctx = RunContext(cfg, file_hash(path))
    ctx.write_run_json()
    return ctx, cases


def make_gateway(cfg: RunConfig, need_chat: bool = True, need_embeddings: bool = False) -> Gateway:
    key = cfg.api_key()
    chat = HttpTransport(cfg.chat_url, key, cfg.request_timeout) if cfg.chat_url else None
    emb_url = cfg.embeddings_url or cfg.chat_url
    emb = HttpTransport(emb_url, key, cfg.request_timeout) if emb_url else None
    if need_chat:
        require(cfg.chat_url, "chat_url")
    if need_embeddings:
        require(emb_url, "embeddings_url")
    gcfg = GatewayConfig(
        detector_model=cfg.detector_model,
        coherence_model=cfg.coherence_model,
        caption_model=cfg.caption_model,
        compose_model=cfg.compose_model,
        embed_model=cfg.embed_model,
        top_k=cfg.top_k,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        max_images=cfg.max_images,
        overlay_thickness=cfg.overlay_thickness,
        add_color=tuple(cfg.add_color),  # type: ignore[arg-type]
        edit_color=tuple(cfg.edit_color),  # type: ignore[arg-type]
        remove_color=tuple(cfg.remove_color),  # type: ignore[arg-type]
        retries=cfg.retries,
        backoff=tuple(cfg.backoff),
        concurrency=cfg.concurrency,
    )
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
    return Gateway(chat, emb, gcfg, cache=cache, image_root=cfg.resolved_image_root())


def finish_calls(ctx: RunContext, gw: Gateway, kind: str) -> None:
    ctx.write_jsonl(f"calls-{kind}.jsonl", f"calls-{kind}", (c.to_json() for c in gw.calls))
    log.info("%s: %d network calls, %d cache hits", kind, gw.network_calls, gw.cache_hits)


def summarize(ctx: RunContext, kind: str, summary: dict[str, Any]) -> None:
    ctx.write_json(f"{kind}.summary.json", f"{kind}-summary", summary)
    click.echo(json.dumps(summary, sort_keys=True))


# --- commands ----------------------------------------------------------------------


@click.group()
@click.version_option(__version__, prog_name="editeval")
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int) -> None:
    """Evaluate instruction-based image editing through difference detection and coherence."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command("mine-pairs")
@config_options
@command("mine-pairs")
def mine_pairs_cmd(cfg: RunConfig) -> int:
    """Mine similar image pairs and label their object differences."""
    ann = Path(require(cfg.annotations, "annotations"))
    corpus = load_annotations(ann, cfg.embeddings, normalize=cfg.normalize_embeddings)
    try:
        pairs = mine_pairs(corpus, cfg.sim_threshold, cfg.max_class_diff)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    by_id = {im.image_id: im for im in corpus}
    labeled = [
        dataclasses.replace(p, labels=tuple(label_pair(by_id[p.image_a], by_id[p.image_b], cfg.edit_iou, cfg.min_side_px)))
        for p in pairs
    ]
    ctx = RunContext(cfg, file_hash(ann, cfg.embeddings))
    ctx.write_run_json()
    ctx.write_jsonl(cfg.pairs_output, "stage1-pairs", (p.to_json() for p in labeled))
    counts = {"ADD": 0, "REMOVE": 0, "EDIT": 0}
    for p in labeled:
        for g in p.labels:
            counts[g.command.value] += 1
    summarize(ctx, "mine-pairs", {"images": len(corpus), "pairs": len(labeled), "labels": counts})
    return EXIT_OK


@main.command("build-stage2")
@config_options
@command("build-stage2")
def build_stage2_cmd(cfg: RunConfig) -> int:
    """Sample inpainting jobs (objects, operations, augmentation) into a manifest."""
    ann = Path(require(cfg.annotations, "annotations"))
    corpus = load_annotations(ann)
    try:
        balance = OpBalance(**cfg.op_balance)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"op_balance: {exc}") from None
    loader = png_mask_loader(cfg.masks_root) if cfg.masks_root else None
    manifest = build_stage2_manifest(corpus, cfg.seed, balance, mask_loader=loader, apply_probability=cfg.jpeg_probability)
    manifest = plan_augmentation(manifest, cfg.jpeg_probability)
    for w in manifest.warnings:
        click.echo(f"warning: {w}", err=True)
    problems = validate_stage2_manifest(manifest, corpus, mask_loader=loader)
    ctx = RunContext(cfg, file_hash(ann))
    ctx.write_run_json()
    ctx.write_jsonl(cfg.manifest_output, "stage2-manifest", (r.to_json() for r in manifest.records))
    summarize(ctx, "build-stage2", {**manifest.summary(), "violations": problems})
    if problems:
        raise PartialFailure(f"{len(problems)} manifest records failed validation")
    return EXIT_OK


@main.command("detect")
@config_options
@command("detect")
def detect_cmd(cfg: RunConfig) -> int:
    """Detect differences for every case (the edit prompt is not sent)."""
    ctx, cases = dataset_context(cfg)
    gw = make_gateway(cfg)
    results = gw.detect_many(cases)
    ctx.write_jsonl("detections.jsonl", "detections", (r.to_json() for r in results))
    finish_calls(ctx, gw, "detect")
    ok = [r for r in results if r.report is not None]
    failed = [r.case_id for r in results if r.report is None]
    summarize(
        ctx,
        "detect",
        {
            "cases": len(results),
            "failed": failed,
            "differences": sum(len(r.report.differences) for r in ok),  # type: ignore[union-attr]
            "malformed_lines": sum(len(r.report.malformed_lines) for r in ok),  # type: ignore[union-attr]
            "unscored": sum(len(r.report.unscored) for r in ok),  # type: ignore[union-attr]
            "no_change_cases": sum(not r.report.differences for r in ok),  # type: ignore[union-attr]
        },
    )
    if failed:
        raise PartialFailure(f"{len(failed)} case(s) failed detection")
    return EXIT_OK


@main.command("coherence")
@config_options
@click.option("--ground-truth/--no-ground-truth", default=True, help="Also judge ground-truth differences.")
@command("coherence")
def coherence_cmd(cfg: RunConfig, ground_truth: bool) -> int:
    """Judge each detected difference (and each ground-truth difference) against the prompt."""
    ctx, cases = dataset_context(cfg)
    by_id = {c.case_id: c for c in cases}
    dets = load_detections(ctx.out)
    items = []
    for cid, det in sorted(dets.items()):
        if det.report is None or cid not in by_id:
            continue
        items.extend((by_id[cid], i, d) for i, d in enumerate(det.report.differences))
    gw = make_gateway(cfg)
    results = gw.assess_many(items)
    ctx.write_jsonl("verdicts.jsonl", "verdicts", (r.to_json() for r in results))
    failed = [f"{r.case_id}#{r.index}" for r in results if r.verdict is None]
    summary: dict[str, Any] = {
        "differences": len(results),
        "failed": failed,
        "coherent": sum(1 for r in results if r.verdict and r.verdict.decision),
        "flagged_unparseable": sum(1 for r in results if r.verdict and r.verdict.flagged_unparseable),
    }
    if ground_truth:
        gt_items = [
            (c, i, g.as_difference()) for c in cases if c.ground_truth for i, g in enumerate(c.ground_truth)
        ]
        gt_results = gw.assess_many(gt_items)
        ctx.write_jsonl("gt_verdicts.jsonl", "gt-verdicts", (r.to_json() for r in gt_results))
        gt_failed = [f"{r.case_id}#{r.index}" for r in gt_results if r.verdict is None]
        summary["ground_truth_differences"] = len(gt_results)
        summary["ground_truth_failed"] = gt_failed
        failed += gt_failed
    finish_calls(ctx, gw, "coherence")
    summarize(ctx, "coherence", summary)
    if failed:
        raise PartialFailure(f"{len(failed)} coherence call(s) failed")
    return EXIT_OK


@main.command("eval-detect")
@config_options
@command("eval-detect")
def eval_detect_cmd(cfg: RunConfig) -> int:
    """AP suite over detections in class-agnostic and class-aware modes."""
    ctx, cases = dataset_context(cfg)
    dets = load_detections(ctx.out)
    missing_gt = [c.case_id for c in cases if c.ground_truth is None]
    if missing_gt:
        raise ConfigError(f"cases without ground truth: {', '.join(missing_gt[:5])}")
    rows, failed = [], []
    for c in cases:
        det = dets.get(c.case_id)
        if det is None or det.report is None:
            failed.append(c.case_id)
            continue
        rows.append((det.report.differences, c))
    if not rows:
        raise ConfigError("no detections to evaluate")
    reports = {mode: evaluate_detection(rows, mode) for mode in (CLASS_AGNOSTIC, CLASS_AWARE)}
    ctx.write_json(
        "eval_detect.json", "eval-detect", {**{m: r.to_json() for m, r in reports.items()}, "failed_cases": failed}
    )
    click.echo(_ap_table({"Class-agnostic": reports[CLASS_AGNOSTIC], "Class-aware": reports[CLASS_AWARE]}), nl=False)
    if failed:
        raise PartialFailure(f"{len(failed)} case(s) had no detections and were left out")
    return EXIT_OK


@main.command("eval-pipeline")
@config_options
@command("eval-pipeline")
def eval_pipeline_cmd(cfg: RunConfig) -> int:
    """Coherence accuracy over ground-truth areas and coherence AP over detected areas."""
    ctx, cases = dataset_context(cfg)
    by_id = {c.case_id: c for c in cases}
    body: dict[str, Any] = {}
    skipped = 0
    gt_path = ctx.out / "gt_verdicts.jsonl"
    if gt_path.is_file():
        gt_verdicts = load_verdicts(gt_path)
        gts, vs = [], []
        for (cid, i), r in sorted(gt_verdicts.items()):
            case = by_id.get(cid)
            if case is None or not case.ground_truth or r.verdict is None or case.ground_truth[i].coherent is None:
                skipped += 1
                continue
            gts.append(case.ground_truth[i])
            vs.append(r.verdict)
        body["coherence_accuracy"] = round(coherence_accuracy(gts, vs), 6) if gts else None
        body["coherence_accuracy_n"] = len(gts)
    outcomes, failed = outcomes_for(ctx.out)
    rows = []
    for cid, o in sorted(outcomes.items()):
        case = by_id.get(cid)
        if case is None or case.ground_truth is None:
            continue
        keep = [k for k, v in enumerate(o.verdicts) if v is not None]
        skipped += len(o.verdicts) - len(keep)
        rows.append(([o.differences[k] for k in keep], [o.verdicts[k] for k in keep], case))
    if any(g.coherent is None for _, _, c in rows for g in c.ground_truth or ()):
        raise ConfigError("coherence AP needs a coherence label on every ground-truth difference")
    body["coherence_ap"] = evaluate_coherence_ap(rows).to_json() if rows else None
    body["skipped"] = skipped
    body["failed_cases"] = failed
    ctx.write_json("eval_pipeline.json", "eval-pipeline", body)
    click.echo(dumps_json(body), nl=False)
    if failed or skipped:
        raise PartialFailure(f"{len(failed)} failed case(s), {skipped} unjudged difference(s)")
    return EXIT_OK


@main.command("rank")
@config_options
@click.option("--run", "runs", multiple=True, metavar="NAME=DIR", help="A model's run directory (repeatable).")
@click.option("--group-by", default=None, help="Split one run into models by this case field.")
@command("rank")
def rank_cmd(cfg: RunConfig, runs: Sequence[str], group_by: str | None) -> int:
    """Correct edits / unwanted edit area / no visual change per editing model."""
    model_runs: dict[str, dict[str, CaseOutcome]] = {}
    failed: list[str] = []
    if runs:
        if group_by:
            raise ConfigError("use either --run or --group-by")
        for spec in runs:
            if "=" not in spec:
                raise ConfigError(f"--run expects NAME=DIR, got {spec!r}")
            name, d = spec.split("=", 1)
            outs, bad = outcomes_for(Path(d))
            model_runs[name] = outs
            failed += [f"{name}:{c}" for c in bad]
        dataset_hash = file_hash(cfg.dataset) if cfg.dataset else None
        ctx = RunContext(cfg, dataset_hash)
    else:
        ctx, cases = dataset_context(cfg)
        field = group_by or cfg.group_field
        outs, bad = outcomes_for(ctx.out)
        failed += bad
        for c in cases:
            if field not in c.extra:
                raise ConfigError(f"case {c.case_id} has no {field!r} field")
            if cfg.align_field not in c.extra:
                raise ConfigError(f"case {c.case_id} has no {cfg.align_field!r} field")
            o = outs.get(c.case_id)
            if o is None:
                continue
            key = str(c.extra[cfg.align_field])
            group = model_runs.setdefault(str(c.extra[field]), {})
            if key in group:
                raise ConfigError(f"duplicate {cfg.align_field} {key!r} in model {c.extra[field]}")
            group[key] = dataclasses.replace(o, case_id=key)
    if not model_runs:
        raise ConfigError("no runs to rank")
    common = set.intersection(*(set(v) for v in model_runs.values()))
    dropped = sum(len(set(v) - common) for v in model_runs.values())
    report = ranking_axes(
        {m: [v[k] for k in sorted(common)] for m, v in model_runs.items()}, cfg.confidence_floor
    )
    ctx.write_json("rank.json", "rank", {**report.to_json(), "dropped_cases": dropped, "failed_cases": failed})
    ctx.write_text("rank.csv", "rank", report.to_csv())
    ctx.write_text("rank.txt", "rank", report.to_text())
    click.echo(report.to_text(), nl=False)
    if dropped or failed:
        raise PartialFailure(f"{dropped} case(s) not shared by every model")
    return EXIT_OK


def _score_case(
    gw: Gateway, cfg: RunConfig, case: EditCase, outcome: CaseOutcome
) -> tuple[str, dict[tuple[str, str], float], dict[str, str]]:
    original, edited = gw.case_images(case)
    caption = gw.caption(original, case.case_id)
    target = gw.compose_target_caption(caption, case.prompt, case.case_id)
    fill = tuple(cfg.mask_fill)
    diffs, verdicts = outcome.differences, outcome.verdicts
    scores = {}
    for metric, kind, _ in STUDY_ROWS:
        policy = MaskPolicy(kind, fill, cfg.seed if kind is PolicyKind.RANDOM else None)  # type: ignore[arg-type]
        if metric == "clip_i":
            scores[(metric, kind.value)] = clip_i(gw, case, (original, edited), diffs, verdicts, policy)
        else:
            scores[(metric, kind.value)] = clip_t(gw, case, edited, diffs, verdicts, target, policy)
    return case.case_id, scores, {"caption": caption, "target_caption": target}


@main.command("correlate")
@config_options
@command("correlate")
def correlate_cmd(cfg: RunConfig) -> int:
    """Masked CLIP-I/CLIP-T against human ratings (eight-row table)."""
    ctx, cases = dataset_context(cfg)
    outcomes, failed = outcomes_for(ctx.out)
    rated = [c for c in cases if c.human_ratings is not None and c.case_id in outcomes]
    gw = make_gateway(cfg, need_embeddings=True)

    def one(case: EditCase):
        try:
            return _score_case(gw, cfg, case, outcomes[case.case_id])
        except (GatewayError, OSError, ValueError) as exc:
            log.error("correlate %s: %s", case.case_id, exc)
            return case.case_id, None, {"error": str(exc)}

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        results = sorted(pool.map(one, rated), key=lambda r: r[0])
    scores: dict[tuple[str, str], dict[str, float]] = {(m, k.value): {} for m, k, _ in STUDY_ROWS}
    caption_rows, score_rows = [], []
    for cid, sc, extra in results:
        caption_rows.append({"case_id": cid, **extra})
        if sc is None:
            failed.append(cid)
            continue
        for k, v in sc.items():
            scores[k][cid] = v
        score_rows.append({"case_id": cid, **{f"{m}/{p}": round(v, 9) for (m, p), v in sc.items()}})
    ratings = {c.case_id: c.human_ratings for c in cases if c.case_id in outcomes}
    groups = None
    if cfg.aggregation == "group_mean":
        groups = {}
        for c in cases:
            if cfg.group_field not in c.extra:
                raise ConfigError(f"case {c.case_id} has no {cfg.group_field!r} field")
            groups[c.case_id] = str(c.extra[cfg.group_field])
    table = correlation_study(scores, ratings, groups)
    notes = {"policy_seed": cfg.seed, "mask_fill": cfg.mask_fill, "embed_model": cfg.embed_model, "failed_cases": failed}
    ctx.write_jsonl("captions.jsonl", "captions", caption_rows)
    ctx.write_jsonl("clip_scores.jsonl", "clip-scores", score_rows)
    ctx.write_json("correlate.json", "correlate", {**table.to_json(), **notes})
    ctx.write_text("correlate.csv", "correlate", table.to_csv())
    ctx.write_text("correlate.txt", "correlate", table.to_text())
    finish_calls(ctx, gw, "correlate")
    click.echo(table.to_text(), nl=False)
    if failed:
        raise PartialFailure(f"{len(failed)} case(s) could not be scored")
    return EXIT_OK


# --- report ------------------------------------------------------------------------


def _fmt(v: float | None, scale: float = 100.0) -> str:
    return "-" if v is None else f"{scale * v:.1f}"


def _ap_table(reports: dict[str, APReport]) -> str:
    from .evalcomp import _table

    header = ("Setting", "AP", "AP50", "AP75", "AP_M", "AP_L", "AP_ADD", "AP_REM", "AP_EDIT")
    body = []
    for name, r in reports.items():
        pc = r.per_class
        body.append(
            (name, _fmt(r.ap), _fmt(r.ap50), _fmt(r.ap75), _fmt(r.ap_m), _fmt(r.ap_l),
             _fmt(pc.get("ADD")), _fmt(pc.get("REMOVE")), _fmt(pc.get("EDIT")))
        )
    return _table(header, body)


def _ap_from_json(d: dict[str, Any]) -> APReport:
    per = {k: d.get(j) for k, j in (("ADD", "ap_add"), ("REMOVE", "ap_rem"), ("EDIT", "ap_edit")) if j in d}
    return APReport(d["mode"], d["ap"], d["ap50"], d["ap75"], d["ap_m"], d["ap_l"], per, d["num_cases"], d["num_gts"], d["num_predictions"])


def _find_runs(paths: Sequence[Path]) -> list[Path]:
    runs = []
    for p in paths:
        if (p / "run.json").is_file():
            runs.append(p)
        elif p.is_dir():
            runs += sorted(q.parent for q in p.glob("*/run.json"))
    return runs


def build_report(runs: Sequence[Path]) -> str:
    if not runs:
        raise ConfigError("no runs found")
    metas = [json.loads((r / "run.json").read_text(encoding="utf-8")) for r in runs]
    hashes = {m.get("dataset_hash") for m in metas}
    if len(hashes) > 1:
        raise ConfigError("runs were produced from different datasets; refusing to merge")
    lines = [f"editeval {__version__} report", f"dataset {hashes.pop()}", ""]
    for run, meta in zip(runs, metas):
        lines.append(f"== run {run.name} (config {meta.get('config_hash')})")
        lines.append("")
        ed = run / "eval_detect.json"
        if ed.is_file():
            d = json.loads(ed.read_text(encoding="utf-8"))
            reps = {"Class-agnostic": _ap_from_json(d[CLASS_AGNOSTIC]), "Class-aware": _ap_from_json(d[CLASS_AWARE])}
            lines += ["Difference detection", _ap_table(reps)]
        ep = run / "eval_pipeline.json"
        if ep.is_file():
            d = json.loads(ep.read_text(encoding="utf-8"))
            lines.append("Coherence")
            lines.append(f"  accuracy over ground-truth areas: {_fmt(d.get('coherence_accuracy'))} (n={d.get('coherence_accuracy_n', 0)})")
            ap = d.get("coherence_ap")
            if ap:
                lines.append(
                    f"  AP over detected areas: AP {_fmt(ap['ap'])}  AP50 {_fmt(ap['ap50'])}  AP75 {_fmt(ap['ap75'])}"
                    f"  coherent {_fmt(ap.get('ap_coherent'))}  non-coherent {_fmt(ap.get('ap_non_coherent'))}"
                )
            lines.append("")
        for name, title in (("rank.txt", "Model ranking"), ("correlate.txt", "Correlation with human ratings")):
            p = run / name
            if p.is_file():
                body = p.read_text(encoding="utf-8").split("\n", 1)[1]
                lines += [title, body]
    return "\n".join(lines).rstrip("\n") + "\n"


@main.command("report")
@click.argument("paths", nargs=-1, type=click.Path(path_type=Path))
@click.option("--output", type=click.Path(path_type=Path), default=None, help="Where to write report.txt.")
def report_cmd(paths: Sequence[Path], output: Path | None) -> None:
    """Merge one or more run directories into a human-readable report."""
    try:
        runs = _find_runs(paths or [Path(".")])
        text = build_report(runs)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    target = output or (runs[0] / "report.txt")
    write_atomic(target, text)
    click.echo(text, nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
