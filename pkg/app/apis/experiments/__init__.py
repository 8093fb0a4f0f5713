"""Named experiment presets, sectioned config files and reproducible run records.

Precedence, lowest first: preset defaults, the config file, `--set section.key=value`
overrides, then the `--seed` / `--out` flags.
"""

import configparser
import hashlib
import io
import logging
import re
import subprocess
import time
from datetime import datetime, timezone
from math import comb, sqrt
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import pandas as pd
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.env import settings
from app.apis.adversary_pipeline import build_adversarial_F, global_agreement_audit, lift_lists, planted_adversary
from app.apis.complex_core import SimplicialComplex, build_complete, builtin_complex, kneser_graph, parse_facet_text, read_complex
from app.apis.dp_test import EXACT, MONTE_CARLO, LocalAssignment, run_dp_test
from app.apis.list_decoder import DecodeParams, decode_global, planted_assignment, shield_audit, short_list, subinstance_stability
from app.apis.models import CriterionVerdict, StageReport, StageStatus
from app.apis.spectral import down_up_spectrum, link_expansion
from app.apis.ug_core import (
    SWAP,
    UGInstance,
    coboundary_audit,
    coboundary_instance,
    f2_cocycle_witness,
    planted_list_instance,
    strong_to_weak,
    then,
    triangle_consistency,
    ug_value_exact,
    ug_value_propagate,
)
from app.apis.utils import ConfigError, HdxError, distance, make_rng, mix_seed, random_bits

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments")

__version__ = "0.1.0"

SCHEMA_LINE = "# schema=1"


class ComplexSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str = "complete"
    n: Optional[int] = 12
    d: Optional[int] = 6
    facets: Optional[str] = None


class TesterSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = 4
    s: int = 2
    nu: float = 0.1
    trials: int = 100_000
    functions: int = 20
    corruption: float = 0.0


class PipelineSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    delta: float = 0.3
    eta: float = 0.1
    schedule: str = "geometric"
    rounds: int = 8
    t: int = 1
    m: int = 2
    separation: float = 0.4
    restrictions: int = 50
    instances: int = 100


class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: str = "completeness"
    seed: int = 0
    out: str = "results"
    workers: int = 0


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    complex: ComplexSection = Field(default_factory=ComplexSection)
    tester: TesterSection = Field(default_factory=TesterSection)
    pipeline: PipelineSection = Field(default_factory=PipelineSection)
    run: RunSection = Field(default_factory=RunSection)

    def digest(self) -> str:
        return hashlib.blake2b(self.model_dump_json().encode("utf-8"), digest_size=8).hexdigest()


SECTIONS = tuple(ExperimentConfig.model_fields)


class PresetResult(NamedTuple):
    stages: List[StageReport]
    verdicts: List[CriterionVerdict]
    plots: Dict[str, List[Tuple[float, float]]]


class Preset(NamedTuple):
    description: str
    defaults: Dict[str, Dict[str, Any]]
    run: Callable[[ExperimentConfig], PresetResult]


def _green(ok: bool) -> StageStatus:
    return StageStatus.GREEN if ok else StageStatus.FAILED


def _complex(cfg: ExperimentConfig) -> SimplicialComplex:
    c = cfg.complex
    if c.kind == "facets":
        return read_complex(c.facets)
    return builtin_complex(c.kind, c.n, c.d)


def _complement(f: str) -> str:
    return "".join("1" if b == "0" else "0" for b in f)


def _planted_functions(n: int, m: int, t: int, seed: int) -> List[str]:
    """m planted functions; at t = 1 two lists stay distinct on every vertex only for complementary pairs."""
    rng = make_rng(seed, "functions")
    first = random_bits(rng, n)
    if m == 2 and t == 1:
        return [first, _complement(first)]
    return [first] + [random_bits(rng, n) for _ in range(m - 1)]


def run_completeness(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    k, s = cfg.tester.k, cfg.tester.s
    rng = make_rng(cfg.run.seed, "functions")
    estimates = []
    for _ in range(cfg.tester.functions):
        F = LocalAssignment.direct_product(X, k, random_bits(rng, X.n_vertices))
        estimates.append(run_dp_test(F, k, s, EXACT).estimate)
    ok = all(e == 1.0 for e in estimates)
    stage = StageReport(stage="completeness", status=_green(ok), metrics={"functions": len(estimates), "min_pass": min(estimates)}, seed=cfg.run.seed)
    verdict = CriterionVerdict(criterion="completeness", passed=ok, detail=f"min exact pass rate {min(estimates)} over {len(estimates)} functions")
    return PresetResult([stage], [verdict], {})


def run_random_soundness(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    k, s, trials, seed = cfg.tester.k, cfg.tester.s, cfg.tester.trials, cfg.run.seed
    report = run_dp_test(LocalAssignment.random(X, k, seed), k, s, MONTE_CARLO, trials, seed)
    collision = 1 / comb(X.d - s, k - s)
    expected = collision + (1 - collision) * 2.0 ** -s
    spread = 4 * sqrt(expected * (1 - expected) / trials)
    ok = abs(report.estimate - expected) <= spread
    stage = StageReport(
        stage="random_soundness",
        status=_green(ok),
        metrics={"estimate": report.estimate, "ci_lo": report.ci_lo, "ci_hi": report.ci_hi, "expected": expected, "covers": report.covers(expected)},
        seed=seed,
    )
    verdict = CriterionVerdict(
        criterion="random-soundness", passed=ok, detail=f"estimate {report.estimate:.5f} vs expected {expected:.5f} (±{spread:.5f})"
    )
    histogram = report.diagnostics.get("intersection_histogram", {})
    return PresetResult([stage], [verdict], {"intersection_sizes": [(float(a), float(b)) for a, b in histogram.items()]})


def run_planted_adversary(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    k, s, seed = cfg.tester.k, cfg.tester.s, cfg.run.seed
    t, m = cfg.pipeline.t, cfg.pipeline.m
    functions = _planted_functions(X.n_vertices, m, t, seed)
    report, _, _ = planted_adversary(X, functions, t, k, s, seed, cfg.tester.trials)
    rate_ok = report.test.estimate >= 1 / m - 0.05
    stages = [
        StageReport(
            stage="planted_pass",
            status=_green(rate_ok),
            metrics={"estimate": report.test.estimate, "expected": report.expected, "fraction_consistent": report.fraction_consistent},
            seed=seed,
        )
    ]
    audit_n = min(16, X.n_vertices)
    small = build_complete(audit_n, k)
    planted = _planted_functions(audit_n, m, t, mix_seed(seed, "audit"))
    lifted = lift_lists(small, planted_list_instance(small, t, planted, seed), k, seed)
    audit = global_agreement_audit(build_adversarial_F(lifted, seed), 0.0, "exhaustive", planted=planted)
    audit_ok = audit.agreement <= 0.6 and all(v >= 0.4 for v in audit.candidates.values())
    stages.append(StageReport(stage="exhaustive_audit", status=_green(audit_ok), metrics={"best": audit.agreement, **audit.candidates}, seed=seed))
    verdicts = [
        CriterionVerdict(criterion="planted-pass-rate", passed=rate_ok, detail=f"pass {report.test.estimate:.4f} vs 1/m - 0.05 = {1 / m - 0.05:.4f}"),
        CriterionVerdict(criterion="planted-global-audit", passed=audit_ok, detail=f"max agreement {audit.agreement:.4f} at n={audit_n}"),
    ]
    return PresetResult(stages, verdicts, {})


def run_rp2_coboundary(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    psi = f2_cocycle_witness(X)
    none_ok = f2_cocycle_witness(build_complete(6, 3)) is None
    if psi is None:
        stage = StageReport(stage="rp2_coboundary", status=StageStatus.FAILED, metrics={"witness": None}, seed=cfg.run.seed)
        return PresetResult([stage], [CriterionVerdict(criterion="rp2-coboundary", passed=False, detail=f"{X.name} has no F2 witness")], {})
    consistency = triangle_consistency(psi, "exact").estimate
    value = ug_value_exact(psi).value
    audit, _ = coboundary_audit(psi, mode="exact", seed=cfg.run.seed)
    ok = consistency >= 1 - 1e-12 and value < 1 and audit.c_hat > 0 and none_ok
    stage = StageReport(
        stage="rp2_coboundary",
        status=_green(ok),
        metrics={"consistency": consistency, "value": value, "c_hat": audit.c_hat, "complete_has_witness": not none_ok},
        seed=cfg.run.seed,
    )
    detail = f"consistency {consistency}, value {value:.4f}, c_hat {audit.c_hat:.4f}, complete(6,3) witness-free: {none_ok}"
    return PresetResult([stage], [CriterionVerdict(criterion="rp2-coboundary", passed=ok, detail=detail)], {})


def run_kneser_propagation(cfg: ExperimentConfig) -> PresetResult:
    n, t, m = cfg.complex.n, cfg.pipeline.t, cfg.pipeline.m
    graph = kneser_graph(range(n), t)
    found = []
    for j in range(cfg.pipeline.instances):
        psi, _ = coboundary_instance(graph, m, mix_seed(cfg.run.seed, "kneser", j))
        solution = ug_value_propagate(psi, restarts=4, seed=mix_seed(cfg.run.seed, "propagate", j))
        found.append((solution.value, len(solution.satisfying)))
    ok = all(abs(value - 1) <= 1e-9 and count == m for value, count in found)
    stage = StageReport(
        stage="kneser_propagation",
        status=_green(ok),
        metrics={"instances": len(found), "min_value": min(v for v, _ in found), "distinct": sorted({c for _, c in found})},
        seed=cfg.run.seed,
    )
    detail = f"{sum(abs(v - 1) <= 1e-9 and c == m for v, c in found)}/{len(found)} instances with value 1 and {m} satisfying labelings"
    return PresetResult([stage], [CriterionVerdict(criterion="kneser-propagation", passed=ok, detail=detail)], {})


def run_strong_weak_law(cfg: ExperimentConfig) -> PresetResult:
    seed = cfg.run.seed
    holds = []
    points = []
    for j in range(cfg.pipeline.instances):
        X = build_complete(6 + j % 3, 3)
        psi = planted_list_instance(X, 1, _planted_functions(X.n_vertices, 2, 1, mix_seed(seed, "law", j)), seed=j)
        rng = make_rng(seed, "corrupt", j)
        rate = 0.05 * (j % 5)
        pi = {e: (then(p, SWAP) if rng.random() < rate else p) for e, p in psi.stored().items()}
        corrupted = UGInstance(psi.graph, psi.m, pi, psi.lists, psi.lists3)
        _, law = strong_to_weak(corrupted, "exact")
        holds.append(law.holds)
        points.append((law.strong_inconsistency, law.weak_inconsistency))
    ok = all(holds)
    stage = StageReport(stage="strong_weak_law", status=_green(ok), metrics={"fixtures": len(holds), "violations": holds.count(False)}, seed=seed)
    verdict = CriterionVerdict(criterion="strong-weak-law", passed=ok, detail=f"{holds.count(True)}/{len(holds)} fixtures satisfy weak <= 3 strong")
    return PresetResult([stage], [verdict], {"weak_vs_strong": points})


def run_shortlist_recovery(cfg: ExperimentConfig) -> PresetResult:
    n, k, seed = cfg.complex.n, cfg.tester.k, cfg.run.seed
    rng = make_rng(seed, "functions")
    first = random_bits(rng, n)
    flips = set(rng.sample(range(n), round(cfg.pipeline.separation * n)))
    second = "".join(_complement(b) if v in flips else b for v, b in enumerate(first))
    X = build_complete(n, n)
    G = planted_assignment(X, k, [first, second], cfg.tester.corruption, seed).restricted_to(range(n))
    out = short_list(G, cfg.pipeline.delta, 0, cfg.pipeline.eta, seed, rounds=cfg.pipeline.rounds)
    closeness = [min(distance(f, first), distance(f, second)) for f in out.functions]
    recovered = {min((distance(f, g), i) for i, g in enumerate((first, second)))[1] for f in out.functions}
    ok = len(out.survivors) == 2 and all(c <= 0.05 for c in closeness) and recovered == {0, 1} and out.within_bound
    stage = StageReport(
        stage="short_list",
        status=_green(ok),
        metrics={"survivors": len(out.survivors), "closeness": closeness, "size_bound": out.size_bound, "rounds_recorded": len(out.trace)},
        seed=seed,
    )
    shield = shield_audit(G, first, second, cfg.tester.nu, seed=seed)
    shield_stage = StageReport(
        stage="shield",
        status=_green(shield.holds),
        metrics={
            "distance": shield.distance,
            "before": shield.before,
            "after": shield.after,
            "fresh_rate": shield.fresh_rate.estimate,
            "fresh_bound": shield.fresh_bound,
            "joint": shield.joint.report.estimate,
        },
        seed=seed,
    )
    verdict = CriterionVerdict(criterion="shortlist-recovery", passed=ok, detail=f"{len(out.survivors)} survivors, distances {closeness}")
    return PresetResult([stage, shield_stage], [verdict], {"round_agreement": [(float(r.round), r.agreement) for r in out.trace]})


def run_spectral_audit(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    i, j = X.d, cfg.tester.k
    report = down_up_spectrum(X, i, j, seed=cfg.run.seed)
    n = X.n_vertices
    closed = j * (n - i) / (i * (n - j))
    links = link_expansion(build_complete(n // 2, X.d), two_sided=False, seed=cfg.run.seed)
    walk_ok = abs(report.second_eigenvalue - closed) <= 1e-4 and abs(report.second_eigenvalue - 0.5) <= 0.06
    link_ok = links.gamma <= 1e-9
    stages = [
        StageReport(
            stage="down_up",
            status=_green(walk_ok),
            metrics={"lambda2": report.second_eigenvalue, "closed_form": closed, "method": report.method, "residual": report.residual},
            seed=cfg.run.seed,
        ),
        StageReport(stage="links", status=_green(link_ok), metrics={"gamma": links.gamma, "links_checked": links.links_checked}, seed=cfg.run.seed),
    ]
    verdicts = [
        CriterionVerdict(criterion="down-up", passed=walk_ok, detail=f"lambda2 {report.second_eigenvalue:.6f}, closed form {closed:.6f}"),
        CriterionVerdict(criterion="one-sided-links", passed=link_ok, detail=f"gamma {links.gamma:.3e}"),
    ]
    return PresetResult(stages, verdicts, {})


def _decode_params(cfg: ExperimentConfig) -> DecodeParams:
    p = cfg.pipeline
    return DecodeParams(
        s=cfg.tester.s, t=p.t, delta=p.delta, eta=p.eta, nu=cfg.tester.nu, rounds=p.rounds, schedule=p.schedule, seed=cfg.run.seed
    )


def run_decode_end_to_end(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    k, seed = cfg.tester.k, cfg.run.seed
    f = random_bits(make_rng(seed, "functions"), X.n_vertices)
    params = _decode_params(cfg)
    decoded, report = decode_global(planted_assignment(X, k, [f], cfg.tester.corruption, seed), params)
    _, control = decode_global(LocalAssignment.random(X, k, mix_seed(seed, "control")), params)
    clean = all(stage.status != StageStatus.FAILED for stage in report.stages)
    ok = decoded == f and clean
    control_ok = control.halted_at == "local_pass"
    stages = list(report.stages) + [
        StageReport(stage=f"control:{stage.stage}", status=stage.status, metrics=stage.metrics, seed=stage.seed) for stage in control.stages
    ]
    verdicts = [
        CriterionVerdict(
            criterion="decode-end-to-end",
            passed=ok,
            detail=f"distance {distance(decoded, f) if decoded else 1.0:.4f}, halted at {report.halted_at}",
        ),
        CriterionVerdict(criterion="decode-negative-control", passed=control_ok, detail=f"random table halted at {control.halted_at}"),
    ]
    return PresetResult(stages, verdicts, {})


def run_subinstance_stability(cfg: ExperimentConfig) -> PresetResult:
    X = _complex(cfg)
    k, seed = cfg.tester.k, cfg.run.seed
    f = random_bits(make_rng(seed, "functions"), X.n_vertices)
    G = planted_assignment(X, k, [f], cfg.tester.corruption, seed)
    report = subinstance_stability(G, X.n_vertices // 2, cfg.pipeline.restrictions, 0.0, seed, 0.1)
    ok = report.within >= report.restrictions - 2
    stage = StageReport(
        stage="subinstance_stability",
        status=_green(ok),
        metrics={"full_value": report.full_value, "within": report.within, "max_deviation": max(report.deviations)},
        seed=seed,
    )
    verdict = CriterionVerdict(criterion="subinstance-stability", passed=ok, detail=f"{report.within}/{report.restrictions} within 0.1")
    return PresetResult([stage], [verdict], {"restricted_values": [(float(j), v) for j, v in enumerate(report.values)]})


PRESETS: Dict[str, Preset] = {
    "completeness": Preset(
        "direct products pass the exact tester with probability 1",
        {"complex": {"kind": "complete", "n": 12, "d": 6}, "tester": {"k": 4, "s": 2, "functions": 20}},
        run_completeness,
    ),
    "random-soundness": Preset(
        "i.i.d. uniform tables pass at 2^-s plus the A = A' collision mass",
        {"complex": {"kind": "complete", "n": 16, "d": 16}, "tester": {"k": 8, "s": 2, "trials": 100_000}},
        run_random_soundness,
    ),
    "planted-adversary": Preset(
        "lifted planted lists pass at about 1/m while no global function explains them",
        {"complex": {"kind": "complete", "n": 20, "d": 10}, "tester": {"k": 8, "s": 3, "trials": 20_000}, "pipeline": {"t": 1, "m": 2}},
        run_planted_adversary,
    ),
    "rp2-coboundary": Preset(
        "the projective plane carries a consistent instance that is not a coboundary",
        {"complex": {"kind": "rp2", "n": None, "d": None}},
        run_rp2_coboundary,
    ),
    "kneser-propagation": Preset(
        "planted coboundary instances on K([10],2) have exactly m satisfying labelings",
        {"complex": {"kind": "complete", "n": 10, "d": 10}, "pipeline": {"t": 2, "m": 3, "instances": 100}},
        run_kneser_propagation,
    ),
    "strong-weak-law": Preset(
        "weak inconsistency stays within three times the strong inconsistency",
        {"pipeline": {"instances": 50}},
        run_strong_weak_law,
    ),
    "shortlist-recovery": Preset(
        "two planted functions at distance 0.4 come back as a two-entry short list",
        {
            "complex": {"kind": "complete", "n": 18, "d": 18},
            "tester": {"k": 6, "corruption": 0.1},
            "pipeline": {"delta": 0.3, "eta": 0.1, "separation": 0.4},
        },
        run_shortlist_recovery,
    ),
    "spectral-audit": Preset(
        "down-up λ2 on complete(20,4) and one-sided link expansion of complete(10,4)",
        {"complex": {"kind": "complete", "n": 20, "d": 4}, "tester": {"k": 2, "s": 1}},
        run_spectral_audit,
    ),
    "decode-end-to-end": Preset(
        "a 5%-corrupted direct product decodes back exactly; a random table halts at the local stage",
        {"complex": {"kind": "complete", "n": 20, "d": 10}, "tester": {"k": 6, "s": 3, "corruption": 0.05}},
        run_decode_end_to_end,
    ),
    "subinstance-stability": Preset(
        "the best agreement of a planted dense instance barely moves under half restrictions",
        {"complex": {"kind": "complete", "n": 24, "d": 4}, "tester": {"k": 4, "s": 2, "corruption": 0.5}, "pipeline": {"restrictions": 50}},
        run_subinstance_stability,
    ),
}


class _Located(NamedTuple):
    line: int
    key_column: int
    value_column: int


_KEY_LINE = re.compile(r"^(\s*)([^=:\s][^=:]*?)\s*[=:]\s*(.*)$")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


def _locate(text: str) -> Dict[Tuple[str, Optional[str]], _Located]:
    """(section, key) → position in the file; (section, None) for section headers."""
    found: Dict[Tuple[str, Optional[str]], _Located] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        header = _SECTION_LINE.match(raw)
        if header:
            section = header.group(1).strip()
            found[(section, None)] = _Located(lineno, raw.index("[") + 1, raw.index("[") + 1)
            continue
        entry = _KEY_LINE.match(raw)
        if entry and section is not None and not raw.lstrip().startswith(("#", ";")):
            key = entry.group(2).strip()
            found[(section, key)] = _Located(lineno, len(entry.group(1)) + 1, raw.index(entry.group(3)) + 1 if entry.group(3) else len(raw) + 1)
    return found


def _merge(base: Dict[str, Dict[str, Any]], extra: Dict[str, Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    out = {section: dict(values) for section, values in base.items()}
    for section, values in extra.items():
        out.setdefault(section, {}).update(values)
    return out


def _raw(value: str) -> Any:
    return None if value.strip().lower() in ("", "none") else value.strip()


def _read_sections(text: str, source: str) -> Tuple[Dict[str, Dict[str, Any]], Dict[Tuple[str, Optional[str]], _Located]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}:{e.lineno}:1: expected a [section] header", line=e.lineno, column=1)
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"{source}:{e.lineno}:1: section [{e.section}] repeated", key=e.section, line=e.lineno, column=1)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"{source}:{e.lineno}:1: {e.section}.{e.option} repeated", key=f"{e.section}.{e.option}", line=e.lineno, column=1)
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"{source}:{lineno}:1: cannot parse {line!r}", line=lineno, column=1)
    located = _locate(text)
    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            where = located.get((section, None), _Located(0, 1, 1))
            raise ConfigError(
                f"{source}:{where.line}:{where.key_column}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}",
                key=section,
                line=where.line,
                column=where.key_column,
            )
        values[section] = {key: _raw(value) for key, value in parser.items(section)}
    return values, located


def _parse_overrides(overrides: Sequence[str]) -> Dict[str, Dict[str, Any]]:
    values: Dict[str, Dict[str, Any]] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set {item!r}: expected section.key=value", key=key.strip())
        if section not in SECTIONS:
            raise ConfigError(f"--set {item!r}: unknown section {section!r}", key=key.strip())
        values.setdefault(section, {})[name] = _raw(value)
    return values


def _facet_file_error(path: str, e: HdxError) -> ConfigError:
    match = re.match(r"line (\d+): (.*)", str(e))
    line = int(match.group(1)) if match else None
    detail = match.group(2) if match else str(e)
    where = f"{path}:{line}:1" if line else path
    return ConfigError(f"complex.facets: {where}: {type(e).__name__}: {detail}", key="complex.facets", line=line, column=1 if line else None)


def _check_ranges(cfg: ExperimentConfig, source: str, located: Dict[Tuple[str, Optional[str]], _Located]) -> None:
    def fail(message: str, *keys: str) -> None:
        spot = next((located[tuple(k.split("."))] for k in keys if tuple(k.split(".")) in located), None)
        prefix = f"{source}:{spot.line}:{spot.value_column}: " if spot else f"{source}: "
        raise ConfigError(prefix + message, key=", ".join(keys), line=spot.line if spot else None, column=spot.value_column if spot else None)

    c, t, p, r = cfg.complex, cfg.tester, cfg.pipeline, cfg.run
    if r.preset not in PRESETS:
        fail(f"run.preset {r.preset!r} is unknown; available: {', '.join(PRESETS)}", "run.preset")
    if c.kind not in ("complete", "facets", "rp2", "torus"):
        fail(f"complex.kind {c.kind!r} must be complete, facets, rp2 or torus", "complex.kind")
    if c.kind == "complete":
        if c.n is None or c.d is None:
            fail("complex.n and complex.d are required for a complete complex", "complex.n", "complex.d")
        if not 1 <= c.d <= c.n:
            fail(f"complex.d = {c.d} must lie in [1, complex.n = {c.n}]", "complex.d", "complex.n")
        if c.n > settings.vertex_cap:
            fail(f"complex.n = {c.n} exceeds the vertex cap {settings.vertex_cap}", "complex.n")
    if c.kind == "facets":
        if not c.facets:
            fail("complex.facets must name a facet file", "complex.facets")
        try:
            parse_facet_text(Path(c.facets).read_text(encoding="ascii"))
        except OSError as e:
            fail(f"complex.facets cannot be read: {e}", "complex.facets")
        except HdxError as e:
            raise _facet_file_error(c.facets, e)
    if t.s > t.k:
        fail(f"tester.s = {t.s} exceeds tester.k = {t.k}", "tester.s", "tester.k")
    if t.s < 0 or t.k < 1:
        fail(f"tester.k = {t.k} and tester.s = {t.s} must satisfy 0 <= s <= k, k >= 1", "tester.k", "tester.s")
    if c.kind == "complete" and c.d is not None and t.k > c.d:
        fail(f"tester.k = {t.k} exceeds complex.d = {c.d}", "tester.k", "complex.d")
    for key, value in (("tester.nu", t.nu), ("tester.corruption", t.corruption), ("pipeline.separation", p.separation)):
        if not 0 <= value <= 1:
            fail(f"{key} = {value} must lie in [0, 1]", key)
    for key, value in (("pipeline.delta", p.delta), ("pipeline.eta", p.eta)):
        if not 0 < value < 1:
            fail(f"{key} = {value} must lie in (0, 1)", key)
    for key, value in (
        ("tester.trials", t.trials),
        ("tester.functions", t.functions),
        ("pipeline.rounds", p.rounds),
        ("pipeline.t", p.t),
        ("pipeline.m", p.m),
        ("pipeline.restrictions", p.restrictions),
        ("pipeline.instances", p.instances),
    ):
        if value < 1:
            fail(f"{key} = {value} must be positive", key)
    if p.schedule not in ("geometric", "ladder"):
        fail(f"pipeline.schedule {p.schedule!r} must be geometric or ladder", "pipeline.schedule")
    if r.workers < 0:
        fail(f"run.workers = {r.workers} must be >= 0", "run.workers")


def load_config(
    text: Optional[str] = None,
    source: str = "<config>",
    preset: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> ExperimentConfig:
    """Layer preset defaults, file values, `section.key=value` overrides and flags; then range-check."""
    file_values, located = _read_sections(text, source) if text is not None else ({}, {})
    override_values = _parse_overrides(overrides)
    name = preset or override_values.get("run", {}).get("preset") or file_values.get("run", {}).get("preset") or RunSection().preset
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; available: {', '.join(PRESETS)}", key="run.preset")
    values = _merge(_merge(PRESETS[name].defaults, file_values), override_values)
    values.setdefault("run", {})["preset"] = name
    if seed is not None:
        values["run"]["seed"] = seed
    if out is not None:
        values["run"]["out"] = out
    try:
        cfg = ExperimentConfig.model_validate(values)
    except ValidationError as e:
        error = e.errors()[0]
        loc = tuple(str(part) for part in error["loc"])
        spot = located.get(loc[:2]) if len(loc) >= 2 else None
        key = ".".join(loc)
        if spot:
            raise ConfigError(f"{source}:{spot.line}:{spot.value_column}: {key}: {error['msg']}", key=key, line=spot.line, column=spot.value_column)
        raise ConfigError(f"{source}: {key}: {error['msg']}", key=key)
    _check_ranges(cfg, source, located)
    return cfg


def validate_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse and range-check a config file; ConfigError carries key, line and column."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}")
    return load_config(text, source=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        values = getattr(cfg, section).model_dump()
        parser[section] = {key: "none" if value is None else str(value) for key, value in values.items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def artifact_version() -> str:
    """`git describe` of the working tree when available, else the package version."""
    try:
        described = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True,
            text=True,
            check=True,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
        if described:
            return described
    except (OSError, subprocess.CalledProcessError):
        pass
    return f"v{__version__}"


class RunRecord(BaseModel):
    preset: str
    version: str
    config_hash: str
    config: ExperimentConfig
    stages: List[StageReport]
    verdicts: List[CriterionVerdict]
    passed: bool
    # wall-clock data only; excluded from reproducibility comparisons
    timing: Dict[str, Any] = Field(default_factory=dict)

    def deterministic_json(self) -> str:
        return self.model_dump_json(exclude={"timing"}, indent=2)


def _flatten(prefix: str, value: Any, rows: List[Dict[str, Any]], stage: str) -> None:
    if isinstance(value, dict):
        for key, inner in value.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), inner, rows, stage)
    elif isinstance(value, (list, tuple)):
        for i, inner in enumerate(value):
            _flatten(f"{prefix}[{i}]", inner, rows, stage)
    else:
        rows.append({"stage": stage, "metric": prefix, "value": value})


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        frame.to_csv(fh, index=False, lineterminator="\n")


def write_outputs(record: RunRecord, plots: Dict[str, List[Tuple[float, float]]], out: Union[str, Path]) -> Path:
    """report.json, metrics.csv and plotdata/<name>.csv under `out`."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
    rows: List[Dict[str, Any]] = []
    for stage in record.stages:
        rows.append({"stage": stage.stage, "metric": "status", "value": stage.status.value})
        _flatten("", stage.metrics, rows, stage.stage)
    _write_csv(out / "metrics.csv", pd.DataFrame(rows, columns=["stage", "metric", "value"]))
    if plots:
        plot_dir = out / "plotdata"
        plot_dir.mkdir(exist_ok=True)
        for name, points in plots.items():
            _write_csv(plot_dir / f"{name}.csv", pd.DataFrame(points, columns=["x", "y"]))
    return out


def run_preset(
    name: str,
    overrides: Sequence[str] = (),
    config_path: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
    write: bool = True,
) -> RunRecord:
    """Run one preset; a failing preset still yields (and writes) a record with `passed` false."""
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; available: {', '.join(PRESETS)}", key="run.preset")
    text = Path(config_path).read_text(encoding="utf-8") if config_path else None
    cfg = load_config(text, str(config_path or "<defaults>"), name, overrides, seed, None if out is None else str(out))
    previous_workers = settings.workers
    settings.workers = cfg.run.workers
    started = datetime.now(timezone.utc).isoformat()
    clock = time.perf_counter()
    logger.info(f"Running preset {name} (config {cfg.digest()}, seed {cfg.run.seed})")
    try:
        result = PRESETS[name].run(cfg)
    except HdxError as e:
        logger.error(f"Preset {name} failed: {e}")
        result = PresetResult(
            [StageReport(stage=name, status=StageStatus.FAILED, metrics={"error": str(e)}, seed=cfg.run.seed)],
            [CriterionVerdict(criterion=name, passed=False, detail=str(e))],
            {},
        )
    finally:
        settings.workers = previous_workers
    record = RunRecord(
        preset=name,
        version=artifact_version(),
        config_hash=cfg.digest(),
        config=cfg,
        stages=result.stages,
        verdicts=result.verdicts,
        passed=all(v.passed for v in result.verdicts),
        timing={"started_at": started, "wall_seconds": time.perf_counter() - clock},
    )
    if write:
        write_outputs(record, result.plots, cfg.run.out)
    return record


class PresetInfo(BaseModel):
    name: str
    description: str


@router.get("/presets", response_model=List[PresetInfo])
async def list_presets() -> List[PresetInfo]:
    """Available experiment presets"""
    return [PresetInfo(name=name, description=preset.description) for name, preset in PRESETS.items()]


class ValidateRequest(BaseModel):
    text: str


@router.post("/validate", response_model=ExperimentConfig)
async def validate(body: ValidateRequest) -> ExperimentConfig:
    """Parse and range-check a config file body; diagnostics cite key, line and column"""
    try:
        return load_config(body.text, source="<request>")
    except ConfigError as e:
        logger.error(f"Config rejected: {e}")
        raise HTTPException(status_code=422, detail={"message": str(e), "key": e.key, "line": e.line, "column": e.column})
