"""``elink`` command line: offline build steps and online link/serve/bench.

Option precedence, lowest to highest: built-in defaults < ``--config`` JSON
file < ``ELINK_*`` environment variables < explicit flags. Config keys and env
names mirror the long flag names (``--top-k`` -> ``top-k`` / ``ELINK_TOP_K``).

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import ElinkError, ValidationError

logger = logging.getLogger("elink")

ENV_PREFIX = "ELINK_"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we report usage errors as 1
        raise UsageError(message, self.format_usage())


@dataclass(frozen=True)
class Opt:
    flag: str
    help: str
    default: object = None
    type: type = str
    required: bool = False
    is_bool: bool = False
    repeat: bool = False
    choices: tuple | None = None

    @property
    def key(self) -> str:
        return self.flag.lstrip("-")

    @property
    def dest(self) -> str:
        return self.key.replace("-", "_")


_SERVING = [
    Opt("--kb", "KB directory", required=True),
    Opt("--index", "lexical index file", required=True),
    Opt("--encoder", "context encoder: stub[:SEED] or precomputed:PATH", "stub"),
    Opt("--aliases", "gazetteer alias TSV (phrase<TAB>label)"),
    Opt("--top-k", "candidates retrieved per mention", 250, int),
    Opt("--mode", "retrieval mode", "mmq", choices=("mmq", "cosine_knn", "mmq_only")),
    Opt("--match-type", "multi-match combination", "best", choices=("best", "most")),
    Opt("--boost", "field boost FIELD=VALUE (repeatable)", repeat=True),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "build-kb": (
        "build a filtered KB from an entity dump and a title->QID mapping",
        [
            Opt("--dump", "entity dump JSONL", required=True),
            Opt("--mapping", "title<TAB>qid<TAB>types TSV", required=True),
            Opt("--out", "output KB directory", required=True),
            Opt("--ban", "comma-separated banned instance-of tags", "person,disambiguation,location"),
            Opt("--drop-unmapped", "drop entities without a QID", False, is_bool=True),
        ],
    ),
    "index": (
        "build the lexical index for a KB",
        [Opt("--kb", "KB directory", required=True), Opt("--out", "index output file", required=True)],
    ),
    "query": (
        "run one multi-match query against an index",
        [
            Opt("--index", "lexical index file", required=True),
            Opt("--text", "query text", required=True),
            Opt("--k", "number of candidates", 250, int),
            Opt("--match-type", "multi-match combination", "best", choices=("best", "most")),
            Opt("--boost", "field boost FIELD=VALUE (repeatable)", repeat=True),
            Opt("--kb", "KB directory (adds titles to the output)"),
        ],
    ),
    "link": (
        "link the mentions in one utterance",
        [
            Opt("--text", "utterance text", required=True),
            Opt("--span", "external mention span START:END (repeatable; skips detection)", repeat=True),
            Opt("--echo", "echo the top N reranked candidates", 0, int),
            *_SERVING,
        ],
    ),
    "serve": (
        "run the HTTP service",
        [
            Opt("--addr", "bind address HOST:PORT", "127.0.0.1:8080"),
            Opt("--max-inflight", "cap on concurrently processed requests", 32, int),
            *_SERVING,
        ],
    ),
    "bench": (
        "evaluate accuracy/latency on a gold set; optional K sweep and ablation",
        [
            Opt("--gold", "gold JSONL {text,start,end,qid}", required=True),
            Opt("--sweep", "comma-separated K values, e.g. 100,250,500"),
            Opt("--ablation", "also run without the dense rerank", False, is_bool=True),
            Opt("--repeat", "timing repetitions", 5, int),
            Opt("--out", "write the JSON report here"),
            *_SERVING,
        ],
    ),
    "prune-model": (
        "drop candidate-tower tensors from a model container",
        [
            Opt("--in", "input container", required=True),
            Opt("--out", "output container", required=True),
            Opt("--prefix", "tensor name prefix to remove", "cand_"),
        ],
    ),
    "synth": (
        "generate a seeded synthetic KB, index, gold set and alias file",
        [
            Opt("--out", "output directory", required=True),
            Opt("--entities", "entity count", 10_000, int),
            Opt("--gold-size", "gold utterances", 200, int),
            Opt("--dim", "embedding dimension", 64, int),
            Opt("--seed", "random seed", 0, int),
            Opt("--homonym", "write the homonym ablation fixture instead", False, is_bool=True),
        ],
    ),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="elink", description="Embedded entity linker")
    parser.add_argument("--version", action="version", version=f"elink {__version__}")
    parser.add_argument("--log-level", default=None, choices=("debug", "info", "warning", "error", "json"))
    parser.add_argument("--config", default=None, help="flat JSON file of flag values")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--log-level", default=None, choices=("debug", "info", "warning", "error", "json"),
                       dest="sub_log_level")
        p.add_argument("--config", default=None, dest="sub_config")
        for opt in opts:
            kw = {"dest": opt.dest, "default": None, "help": opt.help}
            if opt.is_bool:
                p.add_argument(opt.flag, action="store_const", const=True, **kw)
            elif opt.repeat:
                p.add_argument(opt.flag, action="append", **kw)
            else:
                p.add_argument(opt.flag, type=opt.type, choices=opt.choices, **kw)
    return parser


def _coerce(opt: Opt, raw, source: str):
    if opt.is_bool:
        if isinstance(raw, bool):
            return raw
        val = str(raw).strip().lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off", ""):
            return False
        raise ValidationError(f"{source}: {opt.key} expects a boolean, got {raw!r}")
    if opt.repeat:
        if isinstance(raw, list):
            return [str(x) for x in raw]
        return [x for x in str(raw).split(",") if x]
    try:
        val = opt.type(raw)
    except (TypeError, ValueError):
        raise ValidationError(f"{source}: {opt.key} expects {opt.type.__name__}, got {raw!r}") from None
    if opt.choices and val not in opt.choices:
        raise ValidationError(f"{source}: {opt.key} must be one of {list(opt.choices)}")
    return val


def load_config_file(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ValidationError(f"config {path} must be a flat JSON object")
    known = {o.key for _, opts in COMMANDS.values() for o in opts} | {"log-level"}
    out = {}
    for key, value in data.items():
        norm = key.replace("_", "-")
        if norm not in known:
            raise ValidationError(f"config {path}: unknown key {key!r}")
        out[norm] = value
    return out


def resolve_options(command: str, ns: argparse.Namespace, config: dict, env=os.environ) -> dict:
    """Merge defaults < config < env < flags; check required options."""
    values = {}
    for opt in COMMANDS[command][1]:
        flag_val = getattr(ns, opt.dest)
        env_name = ENV_PREFIX + opt.dest.upper()
        if flag_val is not None:
            val = _coerce(opt, flag_val, "flag") if opt.repeat else flag_val
        elif env_name in env:
            val = _coerce(opt, env[env_name], env_name)
        elif opt.key in config:
            val = _coerce(opt, config[opt.key], "config")
        else:
            val = opt.default
        if opt.required and val in (None, ""):
            raise ValidationError(f"missing required option {opt.flag}")
        values[opt.dest] = val
    return values


def _parse_boosts(items: list[str] | None) -> dict[str, float]:
    from .lexical import DEFAULT_BOOSTS

    boosts = dict(DEFAULT_BOOSTS)
    for item in items or []:
        name, sep, value = item.partition("=")
        try:
            boosts[name.strip()] = float(value)
        except ValueError:
            raise ValidationError(f"--boost expects FIELD=VALUE, got {item!r}") from None
        if not sep:
            raise ValidationError(f"--boost expects FIELD=VALUE, got {item!r}")
    return boosts


def _match_type(short: str) -> str:
    return {"best": "best_fields", "most": "most_fields"}[short]


def _linker_config(o: dict, echo: int = 0):
    from .pipeline import LinkerConfig

    return LinkerConfig(
        top_k=o["top_k"],
        retrieval_mode=o["mode"],
        match_type=_match_type(o["match_type"]),
        field_boosts=_parse_boosts(o["boost"]),
        echo_top_n=echo,
    )


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def _ensure_exists(o: dict, *keys: str) -> None:
    for k in keys:
        if o.get(k) is not None and not Path(o[k]).exists():
            raise ValidationError(f"--{k.replace('_', '-')}: {o[k]} does not exist")


# -- subcommands -------------------------------------------------------------


def cmd_build_kb(o: dict) -> int:
    from .ingest import FilterConfig, build_kb

    _ensure_exists(o, "dump", "mapping")
    banned = frozenset(t for t in (o["ban"] or "").split(",") if t.strip())
    stats = build_kb(o["dump"], o["mapping"], FilterConfig(banned, bool(o["drop_unmapped"])), o["out"])
    _emit(stats.to_dict())
    return EXIT_OK


def cmd_index(o: dict) -> int:
    from .kb import open_kb
    from .lexical import build_index, save_index

    _ensure_exists(o, "kb")
    with open_kb(o["kb"]) as kb:
        index = build_index(kb)
    save_index(index, o["out"])
    _emit({"index": str(o["out"]), "doc_count": index.doc_count, "analyzer": index.analyzer})
    return EXIT_OK


def cmd_query(o: dict) -> int:
    from .kb import open_kb
    from .lexical import QuerySpec, load_index, multi_match

    _ensure_exists(o, "index", "kb")
    spec = QuerySpec(o["text"], _parse_boosts(o["boost"]), _match_type(o["match_type"]), o["k"])
    candidates = multi_match(load_index(o["index"]), spec)
    rows = [{"entity_id": e, "score": s} for e, s in candidates]
    if o["kb"]:
        with open_kb(o["kb"]) as kb:
            for row in rows:
                rec = kb.get_entity(row["entity_id"])
                row["title"], row["wikidata_qid"] = rec.title, rec.wikidata_qid
    _emit({"query": o["text"], "candidates": rows})
    return EXIT_OK


def _parse_spans(items: list[str]) -> list[tuple[int, int]]:
    spans = []
    for item in items:
        start, sep, end = item.partition(":")
        try:
            spans.append((int(start), int(end)))
        except ValueError:
            raise ValidationError(f"--span expects START:END, got {item!r}") from None
    return spans


def _load_deps(o: dict):
    from .pipeline import LinkerDeps

    _ensure_exists(o, "kb", "index", "aliases")
    return LinkerDeps.load(o["kb"], o["index"], o["encoder"], o["aliases"])


def cmd_link(o: dict) -> int:
    from .pipeline import link_text, link_with_spans

    config = _linker_config(o, echo=o["echo"])
    spans = _parse_spans(o["span"]) if o["span"] else None
    deps = _load_deps(o)
    try:
        if spans is None:
            result = link_text(o["text"], config, deps)
        else:
            result = link_with_spans(o["text"], spans, config, deps)
    finally:
        deps.kb.close()
    _emit(result.to_dict())
    return EXIT_OK


def cmd_serve(o: dict) -> int:
    import uvicorn

    from .service import ServiceState, create_app

    host, sep, port = o["addr"].rpartition(":")
    if not sep or not port.isdigit():
        raise ValidationError(f"--addr expects HOST:PORT, got {o['addr']!r}")
    config = _linker_config(o)
    if o["max_inflight"] < 1:
        raise ValidationError("--max-inflight must be >= 1")
    # load synchronously so a bad KB/index aborts before binding
    deps = _load_deps(o)
    state = ServiceState(config, deps, max_inflight=o["max_inflight"])
    logger.info("serving %d entities on %s", deps.kb.entity_count, o["addr"])
    # uvicorn drains in-flight requests on SIGTERM, then re-raises the signal
    # against the previous handler; a no-op one lets us exit 0 afterwards
    signal.signal(signal.SIGTERM, lambda *_: None)
    try:
        uvicorn.run(create_app(state), host=host or "127.0.0.1", port=int(port), log_level="warning")
    except SystemExit as exc:  # uvicorn exits 1 when it cannot bind
        if exc.code:
            raise OSError(f"server on {o['addr']} exited with status {exc.code} (address in use?)") from None
    finally:
        deps.kb.close()
    logger.info("shut down cleanly")
    return EXIT_OK


def cmd_bench(o: dict) -> int:
    from .evalbench import ablation, evaluate, format_table, k_sweep, load_gold

    config = _linker_config(o)
    sweep = None
    if o["sweep"]:
        try:
            sweep = [int(k) for k in o["sweep"].split(",") if k.strip()]
        except ValueError:
            raise ValidationError(f"--sweep expects comma-separated integers, got {o['sweep']!r}") from None
    if o["repeat"] < 1:
        raise ValidationError("--repeat must be >= 1")
    _ensure_exists(o, "gold")
    gold = load_gold(o["gold"])
    deps = _load_deps(o)
    report: dict = {"gold_rows": len(gold), "gold_errors": gold.errors}
    cols = ["mode", "top_k", "mentions", "accuracy", "recall_at_k", "avg_latency_ms", "p95_latency_ms"]
    try:
        main = evaluate(config, gold, deps, repeat=o["repeat"])
        report["evaluate"] = main.to_dict()
        print(format_table([main.to_dict()], cols))
        if sweep:
            rows = k_sweep(config, gold, deps, sweep, repeat=o["repeat"])
            report["k_sweep"] = [r.to_dict() for r in rows]
            print()
            print(format_table(report["k_sweep"], ["k", "recall_at_k", "accuracy", "avg_latency_ms", "retrieve_ms"]))
        if o["ablation"]:
            full, lexical = ablation(config, gold, deps, repeat=o["repeat"])
            report["ablation"] = {"full": full.to_dict(), "mmq_only": lexical.to_dict()}
            print()
            print(format_table([full.to_dict(), lexical.to_dict()], cols))
    finally:
        deps.kb.close()
    if o["out"]:
        Path(o["out"]).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_prune_model(o: dict) -> int:
    from .dense import prune_model_artifact

    _ensure_exists(o, "in")
    _emit(prune_model_artifact(o["in"], o["out"], o["prefix"]).to_dict())
    return EXIT_OK


def cmd_synth(o: dict) -> int:
    from .synth import generate_benchmark, homonym_fixture

    if o["homonym"]:
        bench = homonym_fixture(dim=o["dim"], seed=o["seed"])
    else:
        bench = generate_benchmark(o["entities"], o["gold_size"], dim=o["dim"], seed=o["seed"])
    paths = bench.write(o["out"])
    _emit({k: str(v) for k, v in paths.items()})
    return EXIT_OK


HANDLERS = {
    "build-kb": cmd_build_kb,
    "index": cmd_index,
    "query": cmd_query,
    "link": cmd_link,
    "serve": cmd_serve,
    "bench": cmd_bench,
    "prune-model": cmd_prune_model,
    "synth": cmd_synth,
}


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()})


def _setup_logging(level: str) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    if level == "json":
        handler.setFormatter(_JsonFormatter())
        root.setLevel(logging.INFO)
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.setLevel(getattr(logging, level.upper()))
    root.addHandler(handler)


def _report_error(json_mode: bool, kind: str, message: str, code: int, usage: str = "") -> int:
    if json_mode:
        sys.stderr.write(json.dumps({"error": {"type": kind, "message": message, "exit_code": code}}) + "\n")
    else:
        if usage:
            sys.stderr.write(usage)
        sys.stderr.write(f"elink: error: {message}\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_mode = "json" in argv and any(a in ("--log-level", "--log-level=json") for a in argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        return _report_error(json_mode, "usage", str(exc), EXIT_VALIDATION, exc.usage)
    if ns.command is None:
        return _report_error(json_mode, "usage", "a subcommand is required", EXIT_VALIDATION, parser.format_usage())

    config_path = ns.sub_config or ns.config
    try:
        config = load_config_file(config_path) if config_path else {}
        level = ns.sub_log_level or ns.log_level or os.environ.get(ENV_PREFIX + "LOG_LEVEL") or config.get("log-level") or "warning"
        if level not in ("debug", "info", "warning", "error", "json"):
            raise ValidationError(f"unknown log level {level!r}")
        json_mode = level == "json"
        _setup_logging(level)
        options = resolve_options(ns.command, ns, config)
    except ValidationError as exc:
        return _report_error(json_mode, "validation", str(exc), EXIT_VALIDATION)

    try:
        return HANDLERS[ns.command](options)
    except ValidationError as exc:
        return _report_error(json_mode, "validation", str(exc), EXIT_VALIDATION)
    except (ElinkError, OSError, ValueError) as exc:
        return _report_error(json_mode, type(exc).__name__, str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
