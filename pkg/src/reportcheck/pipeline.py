"""End-to-end run orchestration and the auditable run manifest.

Stages form a small DAG (ingest -> extract -> backtrack -> fetch -> verify
-> metrics; judge branches off ingest; aggregate joins metrics and judge).
Each stage writes its outputs into the manifest, which alone suffices to
recompute every derived number offline. Re-running a stage invalidates its
transitive downstream. In replay mode all clocks are pinned so two runs
over the same fixtures produce byte-identical manifests and summaries.
"""

from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path

from . import jsonio
from .backtrack import resolve_all
from .claims import ClaimSet, claims_per_paragraph, extract_all
from .config import RunConfig, TaskFile
from .document import ReferenceEntry, ReportDocument, segment_report
from .evidence import (
    FetchedSource,
    SourceCache,
    chunk_source,
    endpoint_converter,
    fetch_reference,
    select_context,
)
from .gateway import CallLedger, Gateway, PriceTable, ReplayStore, http_transport
from .metrics import compute_integrity, compute_sufficiency, normalize_to_dimensions
from .rubric import FactorScore, JudgeInput, Taxonomy, aggregate, judge_report, load_taxonomy
from .verify import (
    VerificationRecord,
    build_auto_records,
    detect_direct_quotes,
    group_claims,
    verify_all,
)

FIXED_EPOCH = "1970-01-01T00:00:00Z"

STAGE_DEPS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "extract": ("ingest",),
    "backtrack": ("extract",),
    "fetch": ("backtrack",),
    "verify": ("fetch",),
    "metrics": ("verify",),
    "judge": ("ingest",),
    "aggregate": ("metrics", "judge"),
}
STAGE_ORDER = ("ingest", "extract", "backtrack", "fetch", "verify", "metrics", "judge", "aggregate")

# Ledger categories written by each stage (reset when the stage re-runs).
_STAGE_LEDGER_KEYS = {
    "extract": ("extract",),
    "verify": ("verify", "fair_use"),
    "judge": ("judge",),
}

_SUMMARY_COLUMNS = (
    ("Req. Comp.", "Request Completeness"),
    ("Evid. Valid.", "Evidence Validity"),
    ("Struct. Cons.", "Structure Consistency"),
    ("Narr. Style", "Narration Style"),
    ("Info. Int.", "Information Integrity"),
    ("Info. Suff.", "Information Sufficiency"),
    ("Ethics", "Ethics Compliance"),
)


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class MissingUpstreamError(Exception):
    def __init__(self, stage: str, missing: list[str]):
        super().__init__(f"stage {stage!r} requires completed stages: {', '.join(missing)}")
        self.stage = stage
        self.missing = missing


class Runner:
    """Executes stages against one report and maintains the manifest.

    ``transport`` / ``fetch_transport`` override the HTTP layers, which is
    how tests (and embedders) record fixtures without a network.
    """

    def __init__(self, config: RunConfig, run_dir: Path | None = None, transport=None, fetch_transport=None):
        self.config = config
        self.run_dir = Path(run_dir) if run_dir else config.run_dir / self._wallclock_stamp()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.task = TaskFile.load(config.task_file)
        self.taxonomy: Taxonomy = load_taxonomy(config.taxonomy_path)
        self._replay = config.gateway.mode == "replay"
        self._ledger = CallLedger()
        self._transport = transport
        self._fetch_transport = fetch_transport

    @staticmethod
    def _wallclock_stamp() -> str:
        return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")

    def _now_iso(self) -> str:
        if self._replay:
            return FIXED_EPOCH
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    def _now_dt(self) -> datetime:
        if self._replay:
            return datetime(1970, 1, 1, tzinfo=timezone.utc)
        return datetime.now(timezone.utc)

    def build_gateway(self) -> Gateway:
        gw_config = self.config.gateway
        store = None
        if gw_config.mode in ("record", "replay"):
            store = ReplayStore(self.config.replay_store_path())
        transport = self._transport
        if transport is None and gw_config.mode in ("live", "record"):
            transport = http_transport(gw_config.endpoint, gw_config.api_key_env)
        return Gateway(
            mode=gw_config.mode,
            store=store,
            transport=transport,
            price_table=PriceTable.from_config(gw_config.price_table),
            ledger=self._ledger,
            max_retries=gw_config.max_retries,
        )

    def new_manifest(self) -> dict:
        return {
            "config": self.config.snapshot(),
            "task": self.task.to_dict(),
            "stages": {},
            "ledger": {},
            "timestamps": {"started": self._now_iso(), "finished": None},
        }

    # --- persistence ---------------------------------------------------------

    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def save(self, manifest: dict) -> None:
        jsonio.write_canonical(self.manifest_path(), manifest)

    def write_summary(self, manifest: dict) -> Path:
        path = self.run_dir / "summary.md"
        path.write_text(render_summary(manifest), encoding="utf-8")
        return path

    # --- stage execution -----------------------------------------------------

    def run_stage(self, stage: str, manifest: dict) -> dict:
        """Recompute one stage; downstream stages are invalidated."""
        if stage not in STAGE_DEPS:
            raise ValueError(f"unknown stage {stage!r}")
        missing = [dep for dep in STAGE_DEPS[stage] if dep not in manifest["stages"]]
        if missing:
            raise MissingUpstreamError(stage, missing)
        for downstream in _transitive_downstream(stage):
            manifest["stages"].pop(downstream, None)
            for key in _STAGE_LEDGER_KEYS.get(downstream, ()):
                manifest["ledger"].pop(key, None)
        for key in _STAGE_LEDGER_KEYS.get(stage, ()):
            manifest["ledger"].pop(key, None)
            self._ledger.entries.pop(key, None)

        try:
            payload = getattr(self, f"_stage_{stage}")(manifest)
        except (MissingUpstreamError, StageFailure):
            raise
        except Exception as exc:
            self.save(manifest)  # partial manifest preserved for debugging
            raise StageFailure(stage, exc) from exc

        payload["completed_at"] = self._now_iso()
        manifest["stages"][stage] = payload
        for key in _STAGE_LEDGER_KEYS.get(stage, ()):
            if key in self._ledger.entries:
                manifest["ledger"][key] = dict(self._ledger.entries[key])
        self.save(manifest)
        return manifest

    def run_evaluate(self) -> dict:
        manifest = self.new_manifest()
        for stage in STAGE_ORDER:
            manifest = self.run_stage(stage, manifest)
        manifest["timestamps"]["finished"] = self._now_iso()
        self.save(manifest)
        self.write_summary(manifest)
        return manifest

    # --- shared state reconstruction -----------------------------------------

    def _document(self, manifest: dict) -> ReportDocument:
        return segment_report(manifest["stages"]["ingest"]["source_text"])

    def _claims(self, manifest: dict) -> ClaimSet:
        return ClaimSet.from_dicts(manifest["stages"]["extract"]["claims"])

    def _resolutions(self, manifest: dict):
        claims = self._claims(manifest)
        doc = self._document(manifest)
        return {r.claim_id: r for r in resolve_all(claims, doc)}

    def _sources(self, manifest: dict) -> list[FetchedSource]:
        return [FetchedSource.from_dict(row) for row in manifest["stages"]["fetch"]["sources"]]

    # --- stages ----------------------------------------------------------------

    def _stage_ingest(self, manifest: dict) -> dict:
        source_text = self.config.report.read_text(encoding="utf-8")
        doc = segment_report(source_text)
        jsonio.write_canonical(self.run_dir / "document.json", doc.to_dict())
        return {
            "source_text": source_text,
            "document": doc.to_dict(),
            "document_hash": doc.content_hash(),
        }

    def _stage_extract(self, manifest: dict) -> dict:
        doc = self._document(manifest)
        gw = self.build_gateway()
        claims = extract_all(
            doc,
            gw,
            model_id=self.config.models.extractor,
            batch_size=self.config.batch_size,
            max_workers=self.config.gateway.in_flight,
        )
        return {
            "claims": claims.to_dicts(),
            "claims_per_paragraph": claims_per_paragraph(claims, doc),
            "batch_size": self.config.batch_size,
        }

    def _stage_backtrack(self, manifest: dict) -> dict:
        claims = self._claims(manifest)
        doc = self._document(manifest)
        resolutions = resolve_all(claims, doc)
        return {"resolutions": [r.to_dict() for r in resolutions]}

    def _stage_fetch(self, manifest: dict) -> dict:
        doc = self._document(manifest)
        used_keys = sorted(
            {key for row in manifest["stages"]["backtrack"]["resolutions"] for key in row["valid_citations"]}
        )
        cache = SourceCache(self.config.cache_dir_path(self.run_dir))
        offline = self.config.offline_fetch()
        sources = []
        for key in used_keys:
            entry = doc.references.get(key)
            if entry is None:
                # dangling citation: nothing to fetch, recorded as unreachable
                entry = ReferenceEntry(key=key, url="", title=None, raw_line="", unresolvable=True)
            kwargs = {} if self._fetch_transport is None else {"transport": self._fetch_transport}
            if self.config.fetch.converter_endpoint:
                kwargs["markdown_converter"] = endpoint_converter(self.config.fetch.converter_endpoint)
            sources.append(
                fetch_reference(
                    entry,
                    cache=cache,
                    timeout_s=self.config.fetch.timeout_s,
                    retries=self.config.fetch.retries,
                    offline=offline,
                    now=self._now_dt,
                    **kwargs,
                )
            )
        return {"sources": [s.to_dict() for s in sources], "used_references": used_keys}

    def _stage_verify(self, manifest: dict) -> dict:
        doc = self._document(manifest)
        claims = self._claims(manifest)
        resolutions = self._resolutions(manifest)
        sources = self._sources(manifest)
        gw = self.build_gateway()

        chunks_by_key = {
            s.key: chunk_source(s, target_tokens=self.config.retrieval.chunk_tokens) for s in sources if s.ok
        }
        top_n = self.config.retrieval.top_n if self.config.retrieval.enabled else None
        contexts = {}
        for claim in claims:
            resolution = resolutions.get(claim.claim_id)
            if resolution is None or not resolution.valid_citations:
                continue
            pool = [c for key in sorted(resolution.valid_citations) for c in chunks_by_key.get(key, [])]
            contexts[claim.claim_id] = select_context(
                claim.claim_text, pool, n=top_n, claim_id=(claim.position.render(), claim.index)
            )

        groups = group_claims(claims, resolutions, group_size=self.config.group_size)
        records = verify_all(
            groups,
            contexts,
            resolutions,
            gw,
            model_id=self.config.models.verifier,
            max_workers=self.config.gateway.in_flight,
        )
        records.extend(build_auto_records(claims, resolutions))
        records.sort(key=lambda r: r.claim_id)

        fair_use = detect_direct_quotes(
            doc, sources, tau=self.config.tau, gw=gw, model_id=self.config.models.verifier
        )
        return {
            "records": [r.to_dict() for r in records],
            "groups": len(groups),
            "eligible_claims": sum(len(g.claims) for g in groups),
            "fair_use": fair_use.to_dict(),
        }

    def _stage_metrics(self, manifest: dict) -> dict:
        doc = self._document(manifest)
        claims = self._claims(manifest)
        records = [VerificationRecord.from_dict(row) for row in manifest["stages"]["verify"]["records"]]
        sources = self._sources(manifest)
        integrity = compute_integrity(claims, records, doc, sources, denylist=self.config.fetch.denylist)
        sufficiency = compute_sufficiency(claims, records, doc)
        dimensions = normalize_to_dimensions(integrity, sufficiency, self.config.normalization)
        return {
            "integrity": integrity.to_dict(),
            "sufficiency": sufficiency.to_dict(),
            "dimension_scores": dimensions.to_dict(),
            "normalization": self.config.normalization.to_dict(),
        }

    def _stage_judge(self, manifest: dict) -> dict:
        report_text = manifest["stages"]["ingest"]["source_text"]
        gw = self.build_gateway()
        per_judge: dict[str, list[dict]] = {}
        for judge_id in self.config.models.judges:
            judge_input = JudgeInput(
                task_query=self.task.query,
                report=report_text,
                taxonomy=self.taxonomy,
                judge_model_id=judge_id,
                expert_guidance=self.task.expert_guidance,
            )
            scores = judge_report(judge_input, gw, max_workers=self.config.gateway.in_flight)
            per_judge[judge_id] = [s.to_dict() for s in scores]
        return {"factor_scores": per_judge}

    def _stage_aggregate(self, manifest: dict) -> dict:
        info = manifest["stages"]["metrics"]["dimension_scores"]
        info_dimensions = {}
        for dimension in self.taxonomy.dimensions:
            if dimension.name == "Information Integrity" and info["information_integrity"] is not None:
                info_dimensions[dimension.id] = info["information_integrity"]
            if dimension.name == "Information Sufficiency" and info["information_sufficiency"] is not None:
                info_dimensions[dimension.id] = info["information_sufficiency"]

        per_judge = {}
        for judge_id, rows in manifest["stages"]["judge"]["factor_scores"].items():
            scores = [FactorScore.from_dict(row) for row in rows]
            per_judge[judge_id] = aggregate(scores, self.taxonomy, info_dimensions=info_dimensions).to_dict()

        mean_dimensions: dict[str, float | None] = {}
        for dimension in self.taxonomy.dimensions:
            values = [
                agg["per_dimension"][dimension.id]
                for agg in per_judge.values()
                if agg["per_dimension"].get(dimension.id) is not None
            ]
            mean_dimensions[dimension.id] = sum(values) / len(values) if values else None
        defined = [v for v in mean_dimensions.values() if v is not None]
        overall = sum(defined) / len(defined) if defined else None

        return {
            "per_judge": per_judge,
            "judge_mean": {"per_dimension": mean_dimensions, "overall": overall},
            "dimension_names": {d.id: d.name for d in self.taxonomy.dimensions},
        }


def _transitive_downstream(stage: str) -> list[str]:
    downstream = set()
    changed = True
    while changed:
        changed = False
        for other, deps in STAGE_DEPS.items():
            if other in downstream:
                continue
            if stage in deps or downstream & set(deps):
                downstream.add(other)
                changed = True
    return [s for s in STAGE_ORDER if s in downstream]


def render_summary(manifest: dict) -> str:
    """Human-readable run summary; every number is recomputable from the manifest."""
    lines = ["# Evaluation Summary", ""]
    task = manifest.get("task", {})
    lines.append(f"Task: {task.get('task_id', '?')} ({task.get('domain', '')})")
    lines.append(f"Report: {manifest.get('config', {}).get('report', '?')}")
    lines.append("")

    stages = manifest.get("stages", {})
    agg = stages.get("aggregate")
    if agg:
        names_to_id = {name: dim_id for dim_id, name in agg["dimension_names"].items()}
        header = [label for label, _ in _SUMMARY_COLUMNS] + ["Mean"]
        lines.append("| " + " | ".join(["Judge"] + header) + " |")
        lines.append("|" + "---|" * (len(header) + 1))

        def row(label: str, per_dimension: dict, overall) -> str:
            cells = []
            for _, dim_name in _SUMMARY_COLUMNS:
                dim_id = names_to_id.get(dim_name)
                value = per_dimension.get(dim_id) if dim_id else None
                cells.append(f"{value:.2f}" if value is not None else "n/a")
            cells.append(f"{overall:.2f}" if overall is not None else "n/a")
            return "| " + " | ".join([label] + cells) + " |"

        for judge_id, judge_agg in sorted(agg["per_judge"].items()):
            lines.append(row(judge_id, judge_agg["per_dimension"], judge_agg["overall"]))
        mean = agg["judge_mean"]
        lines.append(row("mean", mean["per_dimension"], mean["overall"]))
        lines.append("")

    metrics = stages.get("metrics")
    if metrics:
        lines.append("## Verification metrics")
        lines.append("")
        for section in ("integrity", "sufficiency"):
            for key, value in metrics[section].items():
                shown = "undefined" if value is None else (f"{value:.4f}" if isinstance(value, float) else str(value))
                lines.append(f"- {key}: {shown}")
        lines.append("")

    verify_stage = stages.get("verify")
    if verify_stage:
        lines.append("## Verification run")
        lines.append("")
        lines.append(f"- verification groups (model calls): {verify_stage['groups']}")
        lines.append(f"- eligible claims: {verify_stage['eligible_claims']}")
        fair_use = verify_stage["fair_use"]
        lines.append(f"- direct quotes detected: {len(fair_use['detected_quotes'])}")
        lines.append(f"- fair-use score: {fair_use['score']:.1f}")
        lines.append("")

    extract_stage = stages.get("extract")
    if extract_stage:
        density = extract_stage.get("claims_per_paragraph")
        lines.append("## Extraction")
        lines.append("")
        lines.append(f"- claims: {len(extract_stage['claims'])}")
        lines.append(f"- claims per paragraph: {density:.2f}" if density is not None else "- claims per paragraph: n/a")
        lines.append("")

    ledger = manifest.get("ledger", {})
    if ledger:
        lines.append("## Model-call ledger")
        lines.append("")
        for stage_name, row in sorted(ledger.items()):
            lines.append(
                f"- {stage_name}: {row['calls']} calls, {row['input_tokens']}+{row['output_tokens']} tokens, "
                f"${row['cost_usd']:.4f}"
            )
        lines.append("")
    return "\n".join(lines) + "\n"
