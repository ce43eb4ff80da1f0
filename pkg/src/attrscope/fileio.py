"""File formats: contract spec files, attribution-map and report files with
digest footers, and run manifests. Parsers are total: malformed input comes
back as structured diagnostics, never an unhandled crash."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, asdict

from . import __version__
from .attribution import AttributionMap
from .contract import (
    AttributionContract, ContractError, FeatureRef, SCORE_KINDS, SETTINGS,
    PROCESS_KINDS, SETTING_CLASSIFIER, SETTING_LOCAL, SETTING_P2O,
    SETTING_PROMPT_COND, SETTING_SPAN, SETTING_STAGE, SETTING_STATE,
    make_named,
)
from .evaluation import FaithfulnessCurve, FaithfulnessReport
from .models import PromptedInstance

MAP_HEADER = "attrscope-map v1"
REPORT_HEADER = "attrscope-report v1"

# diagnostic codes
E_MISSING_FIELD = "E_MISSING_FIELD"
E_UNKNOWN_FIELD = "E_UNKNOWN_FIELD"
E_UNKNOWN_SCORE = "E_UNKNOWN_SCORE"
E_OVERLAP = "E_OVERLAP"
E_MISSING_TARGET = "E_MISSING_TARGET"
E_BAD_VALUE = "E_BAD_VALUE"
E_SYNTAX = "E_SYNTAX"
E_BAD_COMBINATION = "E_BAD_COMBINATION"


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: int  # 1-based; 0 when no specific line applies

    def __str__(self) -> str:
        where = f" (line {self.line})" if self.line else ""
        return f"{self.code}: {self.message}{where}"


@dataclass
class ContractSpec:
    """Schematic contract plus instance binding, straight from a file."""
    setting: str | None = None
    score: str | None = None
    fixed: str = "none"
    output: str | None = None
    process: str | None = None
    eligible: str | None = None
    target: int | None = None
    # instance binding
    model_path: str | None = None
    prompt_text: str | None = None
    generation: str = "greedy"       # greedy | sample:<temp> | given
    gen_tokens: str | None = None
    max_len: int = 16
    response_len: int | None = None
    steps: int | None = None
    class_index: int | None = None
    seed: int = 0


@dataclass
class ParseResult:
    spec: ContractSpec | None
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.spec is not None and not self.diagnostics


_KNOWN_FIELDS = {
    "setting", "score", "fixed", "output", "process", "eligible", "target",
    "model", "prompt", "generation", "gen-tokens", "max-len", "response-len",
    "steps", "class", "seed",
}

_FIXED_VALUES = ("none", "prefix", "span")
_OUTPUT_VALUES = ("class", "token", "span", "state", "output")
_ELIGIBLE_VALUES = ("input", "prompt", "prompt+prefix", "prompt+states", "stages")

# (score, fixed, eligible) -> named setting
_SCHEMATIC_TO_SETTING = {
    ("class_log_prob", "none", "input"): SETTING_CLASSIFIER,
    ("token_log_prob", "none", "prompt+prefix"): SETTING_LOCAL,
    ("token_log_prob", "prefix", "prompt"): SETTING_PROMPT_COND,
    ("span_log_prob", "span", "prompt"): SETTING_SPAN,
    ("state_log_prob", "none", "prompt+states"): SETTING_STATE,
    ("stage_delta", "none", "stages"): SETTING_STAGE,
    ("output_log_prob", "none", "prompt"): SETTING_P2O,
}

_SETTING_TO_SCHEMATIC = {v: k for k, v in _SCHEMATIC_TO_SETTING.items()}


def parse_contract_file(text: str) -> ParseResult:
    diags: list[Diagnostic] = []
    fields: dict[str, tuple[str, int]] = {}
    try:
        lines = text.splitlines()
    except Exception:
        return ParseResult(None, [Diagnostic(E_SYNTAX, "undecodable input", 0)])

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            diags.append(Diagnostic(E_SYNTAX, f"expected 'key: value', got {line!r}",
                                    lineno))
            continue
        key, _, value = line.partition(":")
        key = key.strip().lower()
        value = value.strip()
        if key not in _KNOWN_FIELDS:
            diags.append(Diagnostic(E_UNKNOWN_FIELD, f"unknown field {key!r}", lineno))
            continue
        if key in fields:
            diags.append(Diagnostic(E_SYNTAX, f"duplicate field {key!r}", lineno))
            continue
        fields[key] = (value, lineno)

    def take(key, default=None):
        return fields[key][0] if key in fields else default

    def take_int(key, default=None):
        if key not in fields:
            return default
        value, lineno = fields[key]
        try:
            return int(value)
        except ValueError:
            diags.append(Diagnostic(E_BAD_VALUE, f"{key} must be an integer,"
                                    f" got {value!r}", lineno))
            return default

    spec = ContractSpec()
    spec.setting = take("setting")
    spec.target = take_int("target")
    spec.model_path = take("model")
    spec.prompt_text = take("prompt")
    spec.generation = take("generation", "greedy")
    spec.gen_tokens = take("gen-tokens")
    spec.max_len = take_int("max-len", 16)
    spec.response_len = take_int("response-len")
    spec.steps = take_int("steps")
    spec.class_index = take_int("class")
    spec.seed = take_int("seed", 0)

    if spec.setting is not None:
        if spec.setting not in SETTINGS:
            diags.append(Diagnostic(E_BAD_VALUE,
                                    f"unknown setting {spec.setting!r}",
                                    fields["setting"][1]))
            return ParseResult(None, diags)
        spec.score, spec.fixed, spec.eligible = _SETTING_TO_SCHEMATIC[spec.setting]
        spec.output = {"class_log_prob": "class", "token_log_prob": "token",
                       "span_log_prob": "span", "state_log_prob": "state",
                       "stage_delta": "output", "output_log_prob": "output",
                       }[spec.score]
        spec.process = {"classifier": "classifier"}.get(
            spec.setting, "diffusion" if spec.setting in
            (SETTING_STATE, SETTING_STAGE, SETTING_P2O) else "autoregressive")
    else:
        spec.score = take("score")
        if spec.score is None:
            diags.append(Diagnostic(E_MISSING_FIELD,
                                    "missing required field: score", 0))
            return ParseResult(None, diags)
        if spec.score not in SCORE_KINDS:
            diags.append(Diagnostic(E_UNKNOWN_SCORE,
                                    f"unknown score name {spec.score!r}",
                                    fields["score"][1]))
            return ParseResult(None, diags)
        spec.fixed = take("fixed", "none")
        spec.output = take("output")
        spec.process = take("process")
        spec.eligible = take("eligible")
        for key, value, allowed in (("fixed", spec.fixed, _FIXED_VALUES),
                                    ("output", spec.output, _OUTPUT_VALUES),
                                    ("process", spec.process, PROCESS_KINDS),
                                    ("eligible", spec.eligible, _ELIGIBLE_VALUES)):
            if value is None:
                diags.append(Diagnostic(E_MISSING_FIELD,
                                        f"missing required field: {key}", 0))
            elif value not in allowed:
                diags.append(Diagnostic(E_BAD_VALUE,
                                        f"{key} must be one of {allowed},"
                                        f" got {value!r}", fields[key][1]))
        if diags:
            return ParseResult(None, diags)
        if spec.fixed != "none" and spec.eligible in ("prompt+prefix",):
            diags.append(Diagnostic(E_OVERLAP, "eligible/fixed overlap: the"
                                    " generated prefix is both eligible and fixed",
                                    fields.get("fixed", ("", 0))[1]))
            return ParseResult(None, diags)
        combo = (spec.score, spec.fixed, spec.eligible)
        setting = _SCHEMATIC_TO_SETTING.get(combo)
        if setting is None:
            diags.append(Diagnostic(E_BAD_COMBINATION,
                                    f"no named setting matches {combo}", 0))
            return ParseResult(None, diags)
        spec.setting = setting
        expected_process = ("classifier" if setting == SETTING_CLASSIFIER else
                            "diffusion" if setting in (SETTING_STATE, SETTING_STAGE,
                                                       SETTING_P2O)
                            else "autoregressive")
        if spec.process != expected_process:
            diags.append(Diagnostic(E_BAD_COMBINATION,
                                    f"score {spec.score} requires process"
                                    f" {expected_process}", fields["process"][1]))
            return ParseResult(None, diags)

    if spec.output in ("token", "state") and spec.target is None:
        diags.append(Diagnostic(E_MISSING_TARGET, "missing target index", 0))
        return ParseResult(None, diags)
    if diags:
        return ParseResult(None, diags)
    return ParseResult(spec, [])


def resolve_contract(spec: ContractSpec,
                     instance: PromptedInstance) -> AttributionContract:
    target = spec.target
    if spec.setting == SETTING_CLASSIFIER:
        return make_named(spec.setting, instance)
    return make_named(spec.setting, instance, target)


# -- digest-footed structured text ----------------------------------------


class MapParseError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _digest_document(header: str, body: dict) -> str:
    payload = json.dumps(body, sort_keys=True)
    digest = hashlib.sha256(payload.encode()).hexdigest()
    return f"{header}\n{payload}\ndigest: {digest}\n"


def _parse_digest_document(text: str, header: str) -> dict:
    try:
        lines = text.splitlines()
    except Exception as exc:
        raise MapParseError(E_SYNTAX, f"undecodable input: {exc}") from exc
    if not lines or lines[0] != header:
        raise MapParseError(E_SYNTAX, f"missing {header!r} header")
    if len(lines) < 3 or not lines[-1].startswith("digest: "):
        raise MapParseError(E_SYNTAX, "missing digest footer")
    payload = "\n".join(lines[1:-1])
    claimed = lines[-1][len("digest: "):].strip()
    actual = hashlib.sha256(payload.encode()).hexdigest()
    if claimed != actual:
        raise MapParseError("E_DIGEST", "digest mismatch; file corrupted")
    try:
        body = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise MapParseError(E_SYNTAX, f"bad JSON body: {exc}") from exc
    if not isinstance(body, dict):
        raise MapParseError(E_SYNTAX, "body must be a JSON object")
    return body


def _ref_to_list(ref: FeatureRef) -> list:
    return [ref.kind, ref.index, ref.slot]


def _ref_from_list(item) -> FeatureRef:
    try:
        kind, index, slot = item
        return FeatureRef(str(kind), int(index), int(slot))
    except (ValueError, TypeError, ContractError) as exc:
        raise MapParseError(E_BAD_VALUE, f"bad feature ref {item!r}") from exc


def serialize_map(attr_map: AttributionMap) -> str:
    body = {
        "contract_id": attr_map.contract_id,
        "method": [list(kv) for kv in attr_map.method],
        "model_id": attr_map.model_id,
        "instance_digest": attr_map.instance_digest,
        "seed": attr_map.seed,
        "entries": [[*_ref_to_list(ref), score] for ref, score in attr_map.entries],
    }
    return _digest_document(MAP_HEADER, body)


def parse_map(text: str) -> AttributionMap:
    body = _parse_digest_document(text, MAP_HEADER)
    try:
        entries = tuple(
            (_ref_from_list(item[:3]),
             None if item[3] is None else float(item[3]))
            for item in body["entries"])
        return AttributionMap(
            entries=entries,
            contract_id=str(body["contract_id"]),
            method=tuple((str(k), v) for k, v in body["method"]),
            model_id=str(body["model_id"]),
            instance_digest=str(body["instance_digest"]),
            seed=int(body["seed"]))
    except MapParseError:
        raise
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise MapParseError(E_SYNTAX, f"malformed map body: {exc}") from exc


def _curve_to_dict(curve: FaithfulnessCurve | None):
    if curve is None:
        return None
    return {"k_values": list(curve.k_values), "scores": list(curve.scores),
            "ordering": curve.ordering, "mode": curve.mode}


def _curve_from_dict(d) -> FaithfulnessCurve | None:
    if d is None:
        return None
    return FaithfulnessCurve(k_values=tuple(int(k) for k in d["k_values"]),
                             scores=tuple(float(s) for s in d["scores"]),
                             ordering=str(d["ordering"]), mode=str(d["mode"]))


def serialize_report(report: FaithfulnessReport) -> str:
    body = {
        "contract_id": report.contract_id,
        "method": [list(kv) for kv in report.method],
        "K": report.K,
        "policy": list(report.policy_mode_pair),
        "deletion": _curve_to_dict(report.deletion),
        "insertion": _curve_to_dict(report.insertion),
        "random_deletions": [_curve_to_dict(c) for c in report.random_deletions],
        "random_insertions": [_curve_to_dict(c) for c in report.random_insertions],
        "deletion_aopc": report.deletion_aopc,
        "insertion_aopc": report.insertion_aopc,
        "random_deletion_aopcs": list(report.random_deletion_aopcs),
        "stage_entries": [[*_ref_to_list(ref), score]
                          for ref, score in report.stage_entries],
        "seed": report.seed,
    }
    return _digest_document(REPORT_HEADER, body)


def parse_report(text: str) -> FaithfulnessReport:
    body = _parse_digest_document(text, REPORT_HEADER)
    try:
        return FaithfulnessReport(
            contract_id=str(body["contract_id"]),
            method=tuple((str(k), v) for k, v in body["method"]),
            K=int(body["K"]),
            policy_mode_pair=tuple(body["policy"]),
            deletion=_curve_from_dict(body["deletion"]),
            insertion=_curve_from_dict(body["insertion"]),
            random_deletions=tuple(_curve_from_dict(c)
                                   for c in body["random_deletions"]),
            random_insertions=tuple(_curve_from_dict(c)
                                    for c in body["random_insertions"]),
            deletion_aopc=body["deletion_aopc"],
            insertion_aopc=body["insertion_aopc"],
            random_deletion_aopcs=tuple(float(x)
                                        for x in body["random_deletion_aopcs"]),
            stage_entries=tuple(
                (_ref_from_list(item[:3]),
                 None if item[3] is None else float(item[3]))
                for item in body["stage_entries"]),
            seed=int(body["seed"]))
    except MapParseError:
        raise
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise MapParseError(E_SYNTAX, f"malformed report body: {exc}") from exc


# -- manifests and atomic writes ------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class RunManifest:
    tool_version: str
    command: str
    argv: list[str]              # original args minus the output directory
    model_id: str | None
    contract_id: str | None
    input_digests: dict[str, str]
    seeds: dict[str, int]
    timestamp: str
    outputs: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(**data)


def write_manifest(manifest: RunManifest, path: str) -> None:
    atomic_write_text(path, manifest.to_json())


def read_manifest(path: str) -> RunManifest:
    with open(path) as fh:
        return RunManifest.from_json(fh.read())
