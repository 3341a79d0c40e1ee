"""Run configuration: file format, defaults, validation.

A run is configured by a JSON file plus CLI overrides. Paths inside the
file resolve relative to the file's directory. Validation happens at
launch; violations raise ConfigError (CLI exit code 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import jsonio
from .metrics import NormalizationConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskFile:
    task_id: str
    domain: str
    query: str
    expert_guidance: str = ""

    @classmethod
    def load(cls, path: Path) -> "TaskFile":
        try:
            payload = jsonio.load(path)
        except FileNotFoundError:
            raise ConfigError(f"task file not found: {path}")
        except ValueError as exc:
            raise ConfigError(f"task file {path} is not valid JSON: {exc}")
        query = str(payload.get("query", "")).strip()
        if not query:
            raise ConfigError(f"task file {path} has an empty query")
        return cls(
            task_id=str(payload.get("task_id", path.stem)),
            domain=str(payload.get("domain", "")),
            query=query,
            expert_guidance=str(payload.get("expert_guidance", "")),
        )

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "domain": self.domain,
            "query": self.query,
            "expert_guidance": self.expert_guidance,
        }


@dataclass(frozen=True)
class RetrievalConfig:
    enabled: bool = True
    top_n: int = 3
    chunk_tokens: int = 1000


@dataclass(frozen=True)
class GatewayConfig:
    mode: str = "replay"
    endpoint: str = ""
    api_key_env: str = "REPORTCHECK_API_KEY"
    replay_store: str = "replay/gateway.jsonl"
    price_table: dict = field(default_factory=dict)
    max_retries: int = 2
    in_flight: int = 4


@dataclass(frozen=True)
class FetchConfig:
    offline: bool | None = None  # None: offline iff gateway mode is replay
    cache_dir: str = ""
    timeout_s: float = 20.0
    retries: int = 2
    denylist: tuple[str, ...] = ()
    converter_endpoint: str = ""  # markdown-conversion service; blank = built-in stripper


@dataclass(frozen=True)
class ModelsConfig:
    extractor: str = "extractor-default"
    verifier: str = "verifier-default"
    judges: tuple[str, ...] = ("judge-default",)


@dataclass(frozen=True)
class RunConfig:
    task_file: Path
    report: Path
    models: ModelsConfig = ModelsConfig()
    batch_size: int = 20
    group_size: int = 20
    retrieval: RetrievalConfig = RetrievalConfig()
    tau: float = 0.9
    normalization: NormalizationConfig = NormalizationConfig()
    gateway: GatewayConfig = GatewayConfig()
    fetch: FetchConfig = FetchConfig()
    run_dir: Path = Path("run")
    taxonomy_path: Path | None = None
    pooling: str = "global"
    base_dir: Path = Path(".")

    def validate(self) -> None:
        if not self.task_file.exists():
            raise ConfigError(f"task file not found: {self.task_file}")
        if not self.report.exists():
            raise ConfigError(f"report not found: {self.report}")
        if self.taxonomy_path is not None and not self.taxonomy_path.exists():
            raise ConfigError(f"taxonomy file not found: {self.taxonomy_path}")
        if not 1 <= self.batch_size <= 100:
            raise ConfigError(f"batch_size must be in 1..100, got {self.batch_size}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.retrieval.top_n < 1:
            raise ConfigError(f"retrieval.top_n must be >= 1, got {self.retrieval.top_n}")
        if self.retrieval.chunk_tokens < 1:
            raise ConfigError(f"retrieval.chunk_tokens must be >= 1, got {self.retrieval.chunk_tokens}")
        if self.gateway.mode not in ("live", "record", "replay"):
            raise ConfigError(f"gateway.mode must be live|record|replay, got {self.gateway.mode!r}")
        if self.gateway.mode in ("live", "record") and not self.gateway.endpoint:
            raise ConfigError(f"gateway.mode {self.gateway.mode} requires an endpoint")
        if self.gateway.mode == "replay" and not self.replay_store_path().exists():
            raise ConfigError(f"replay store not found: {self.replay_store_path()}")
        if self.pooling not in ("global", "per-task"):
            raise ConfigError(f"pooling must be global or per-task, got {self.pooling!r}")
        if not self.models.judges:
            raise ConfigError("at least one judge model id is required")

    def replay_store_path(self) -> Path:
        return self._resolve(self.gateway.replay_store)

    def cache_dir_path(self, run_dir: Path) -> Path:
        if self.fetch.cache_dir:
            return self._resolve(self.fetch.cache_dir)
        return run_dir / "cache"

    def offline_fetch(self) -> bool:
        if self.fetch.offline is not None:
            return self.fetch.offline
        return self.gateway.mode == "replay"

    def _resolve(self, raw: str | Path) -> Path:
        path = Path(raw)
        return path if path.is_absolute() else self.base_dir / path

    def snapshot(self) -> dict:
        """Everything that shaped the run, for the manifest."""
        return {
            "task_file": str(self.task_file),
            "report": str(self.report),
            "models": {
                "extractor": self.models.extractor,
                "verifier": self.models.verifier,
                "judges": list(self.models.judges),
            },
            "batch_size": self.batch_size,
            "group_size": self.group_size,
            "retrieval": {
                "enabled": self.retrieval.enabled,
                "top_n": self.retrieval.top_n,
                "chunk_tokens": self.retrieval.chunk_tokens,
            },
            "tau": self.tau,
            "normalization": self.normalization.to_dict(),
            "gateway": {
                "mode": self.gateway.mode,
                "endpoint": self.gateway.endpoint,
                "api_key_env": self.gateway.api_key_env,
                "replay_store": str(self.gateway.replay_store),
                "max_retries": self.gateway.max_retries,
                "in_flight": self.gateway.in_flight,
                "price_table": self.gateway.price_table,
            },
            "fetch": {
                "offline": self.offline_fetch(),
                "cache_dir": str(self.fetch.cache_dir),
                "timeout_s": self.fetch.timeout_s,
                "retries": self.fetch.retries,
                "denylist": list(self.fetch.denylist),
                "converter_endpoint": self.fetch.converter_endpoint,
            },
            "taxonomy_path": str(self.taxonomy_path) if self.taxonomy_path else None,
            "pooling": self.pooling,
        }


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def load_config(path: Path, overrides: dict | None = None) -> RunConfig:
    try:
        payload = jsonio.load(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if overrides:
        payload = _merge(payload, overrides)
    base_dir = path.parent.resolve()

    def resolve(raw) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base_dir / p

    report_raw = payload.get("report")
    if isinstance(report_raw, list):
        if len(report_raw) != 1:
            raise ConfigError("exactly one report per run; loop over reports externally")
        report_raw = report_raw[0]
    if not payload.get("task_file") or not report_raw:
        raise ConfigError("config requires task_file and report paths")

    models = payload.get("models", {})
    judges = models.get("judges", ["judge-default"])
    if isinstance(judges, str):
        judges = [judges]

    retrieval = payload.get("retrieval", {})
    gateway = payload.get("gateway", {})
    fetch = payload.get("fetch", {})
    normalization = payload.get("normalization", {})

    try:
        norm_config = NormalizationConfig(
            info_qty_threshold=float(normalization.get("info_qty_threshold", 50.0)),
            cit_qty_threshold=float(normalization.get("cit_qty_threshold", 40.0)),
            ref_qty_threshold=float(normalization.get("ref_qty_threshold", 15.0)),
            cv_cap=float(normalization.get("cv_cap", 2.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad normalization config: {exc}")

    config = RunConfig(
        task_file=resolve(payload["task_file"]),
        report=resolve(report_raw),
        models=ModelsConfig(
            extractor=str(models.get("extractor", "extractor-default")),
            verifier=str(models.get("verifier", "verifier-default")),
            judges=tuple(str(j) for j in judges),
        ),
        batch_size=int(payload.get("batch_size", 20)),
        group_size=int(payload.get("group_size", 20)),
        retrieval=RetrievalConfig(
            enabled=bool(retrieval.get("enabled", True)),
            top_n=int(retrieval.get("top_n", 3)),
            chunk_tokens=int(retrieval.get("chunk_tokens", 1000)),
        ),
        tau=float(payload.get("tau", 0.9)),
        normalization=norm_config,
        gateway=GatewayConfig(
            mode=str(gateway.get("mode", "replay")),
            endpoint=str(gateway.get("endpoint", "")),
            api_key_env=str(gateway.get("api_key_env", "REPORTCHECK_API_KEY")),
            replay_store=str(gateway.get("replay_store", "replay/gateway.jsonl")),
            price_table=dict(gateway.get("price_table", {})),
            max_retries=int(gateway.get("max_retries", 2)),
            in_flight=int(gateway.get("in_flight", 4)),
        ),
        fetch=FetchConfig(
            offline=fetch.get("offline"),
            cache_dir=str(fetch.get("cache_dir", "")),
            timeout_s=float(fetch.get("timeout_s", 20.0)),
            retries=int(fetch.get("retries", 2)),
            denylist=tuple(fetch.get("denylist", ())),
            converter_endpoint=str(fetch.get("converter_endpoint", "")),
        ),
        run_dir=resolve(payload.get("run_dir", "run")),
        taxonomy_path=resolve(payload["taxonomy"]) if payload.get("taxonomy") else None,
        pooling=str(payload.get("pooling", "global")),
        base_dir=base_dir,
    )
    config.validate()
    return config
