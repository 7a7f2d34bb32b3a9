"""Command-line front end: synthesize, verify, simulate, compare.

Configuration files are flat ``section.key = value`` text.  Every file the
CLI writes starts with the fully resolved configuration as ``#! key = value``
lines followed by a ``# content-sha256:`` line hashing the rest of the file,
so any output can be fed back through ``--config`` to reproduce it.

Exit codes: 0 success, 1 usage/config/missing file, 2 synthesis infeasible or
unverified, 3 verification violations, 4 certificate/model hash mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .plant import ControllerParams, PlantParams, run_scenario
from .synthesis import (
    CertificateFormatError,
    ConfigurationError,
    ModelParams,
    SynthesisOptions,
    build_model,
    certificate_digest,
    containment_check,
    default_certificate_path,
    load_certificate,
    model_hash,
    save_certificate,
    synthesize,
    verify_certificate,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_UNVERIFIED = 2
EXIT_VIOLATIONS = 3
EXIT_HASH_MISMATCH = 4

SCENARIOS = ("safety_filter", "vcc_baseline")
# controller fields that always follow the model section
_MODEL_OWNED = {"i_r_lim", "i_lim", "m_c_max", "v_dc", "l_c", "tau", "alpha_printed"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelParams = field(default_factory=ModelParams)
    plant: PlantParams = field(default_factory=PlantParams)
    controller: ControllerParams = field(default_factory=lambda: ControllerParams.from_model(ModelParams()))
    synthesis: SynthesisOptions = field(default_factory=SynthesisOptions)
    filter_tol: float = 1e-10
    scenario: str = "safety_filter"
    verify_samples: int = 100000
    verify_seed: int = 0

    def resolved(self) -> list:
        """All settings as (key, text) pairs in a fixed order."""
        out = []
        for sec, obj in (("model", self.model), ("plant", self.plant), ("synthesis", self.synthesis)):
            out += [(f"{sec}.{f.name}", _fmt(getattr(obj, f.name))) for f in fields(obj)]
        out += [(f"controller.{f.name}", _fmt(getattr(self.controller, f.name)))
                for f in fields(self.controller) if f.name not in _MODEL_OWNED]
        out += [("filter.tol", _fmt(self.filter_tol)), ("scenario.mode", self.scenario),
                ("verify.samples", _fmt(self.verify_samples)), ("verify.seed", _fmt(self.verify_seed))]
        return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _convert(text: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_config_text(text: str) -> dict:
    """Parse ``section.key = value`` lines.

    Files written by this tool carry their settings on ``#!`` lines; when any
    are present only those lines are read.
    """
    lines = text.splitlines()
    embedded = [ln[2:] for ln in lines if ln.startswith("#!")]
    source = embedded if embedded else [ln for ln in lines if not ln.lstrip().startswith("#")]
    out = {}
    for no, raw in enumerate(source, 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {no}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigurationError(f"config line {no}: key {key!r} has no section")
        out[key] = val
    return out


def build_config(values: dict) -> RunConfig:
    sections = {"model": {}, "plant": {}, "synthesis": {}, "controller": {}}
    cfg = RunConfig()
    extra = {}
    for key, val in values.items():
        sec, name = key.split(".", 1)
        if sec in sections:
            sections[sec][name] = val
        else:
            extra[key] = val
    objs = {}
    for sec, default in (("model", ModelParams()), ("plant", PlantParams()), ("synthesis", SynthesisOptions())):
        known = {f.name for f in fields(default)}
        kw = {}
        for name, val in sections[sec].items():
            if name not in known:
                raise ConfigurationError(f"unknown key {sec}.{name}")
            kw[name] = _convert(val, getattr(default, name), f"{sec}.{name}")
        try:
            objs[sec] = replace(default, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(str(exc)) from None
    cdef = ControllerParams()
    ckw = {}
    for name, val in sections["controller"].items():
        if name in _MODEL_OWNED:
            raise ConfigurationError(f"controller.{name} is set through the model section")
        if not hasattr(cdef, name):
            raise ConfigurationError(f"unknown key controller.{name}")
        ckw[name] = _convert(val, getattr(cdef, name), f"controller.{name}")
    cfg = RunConfig(objs["model"], objs["plant"], ControllerParams.from_model(objs["model"], **ckw), objs["synthesis"])
    for key, val in extra.items():
        if key == "filter.tol":
            cfg.filter_tol = _convert(val, 1.0, key)
            if not cfg.filter_tol > 0:
                raise ConfigurationError("filter.tol must be positive")
        elif key == "scenario.mode":
            if val not in SCENARIOS:
                raise ConfigurationError(f"scenario.mode must be one of {', '.join(SCENARIOS)}")
            cfg.scenario = val
        elif key == "verify.samples":
            cfg.verify_samples = _convert(val, 1, key)
        elif key == "verify.seed":
            cfg.verify_seed = _convert(val, 1, key)
        else:
            raise ConfigurationError(f"unknown key {key}")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return build_config(parse_config_text(p.read_text()))


def render_output(cfg: RunConfig, body: str, extra: dict | None = None) -> str:
    head = [f"#! {k} = {v}" for k, v in cfg.resolved()]
    for k, v in (extra or {}).items():
        head.append(f"# {k}: {v}")
    head.append(f"# content-sha256: {hashlib.sha256(body.encode()).hexdigest()}")
    return "\n".join(head) + "\n" + body


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _threads() -> int:
    raw = os.environ.get("SAFEFILTER_THREADS", "")
    try:
        return max(1, int(raw)) if raw else max(1, os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"SAFEFILTER_THREADS must be an integer, got {raw!r}") from None


def _table(rows) -> str:
    width = max(len(r[0]) for r in rows)
    return "".join(f"{r[0]:<{width}}  " + "  ".join(f"{c:>14}" for c in r[1:]) + "\n" for r in rows)


def _num(v) -> str:
    if isinstance(v, int):
        return str(v)
    return "inf" if math.isinf(v) else f"{v:.6g}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synthesize(cfg: RunConfig, out: Path, samples=None, seed=None) -> int:
    opts = cfg.synthesis
    if samples is not None:
        opts = replace(opts, verify_samples=samples)
    if seed is not None:
        opts = replace(opts, seed=seed)
    cfg = replace(cfg, synthesis=opts)
    t0 = time.perf_counter()
    cert = synthesize(cfg.model, opts)
    elapsed = time.perf_counter() - t0
    for k, v in cfg.resolved():
        cert.meta[f"config.{k}"] = v
    cert.meta["content_sha256"] = certificate_digest(cert)
    status = cert.meta.get("status", "Unverified")
    out.mkdir(parents=True, exist_ok=True)
    save_certificate(cert, out / "certificate.cert")
    body = "".join(f"{k} = {cert.meta[k]}\n" for k in ("status", "rounds", "margins", "sdp_iterations")
                   if k in cert.meta)
    body += f"elapsed_s = {elapsed:.3f}\n"
    write_atomic(out / "synthesis_report.txt", render_output(cfg, body))
    print(body, end="")
    return EXIT_OK if status == "Verified" else EXIT_UNVERIFIED


def _load_cert(path, cfg: RunConfig):
    p = Path(path) if path is not None else default_certificate_path()
    if not p.is_file():
        raise UsageError(f"certificate not found: {p}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = load_certificate(p, cfg.model)
    return cert, p


def cmd_verify(cfg: RunConfig, cert_path, out: Path | None, samples=None, seed=None) -> int:
    n = cfg.verify_samples if samples is None else samples
    s = cfg.verify_seed if seed is None else seed
    cert, p = _load_cert(cert_path, cfg)
    m = build_model(cfg.model)
    rep = verify_certificate(m, cert, n, s)
    lines = [f"status = {rep.status}", f"samples = {rep.n_samples}", f"seed = {s}"]
    if cert.hash_mismatch:
        lines.append(f"warning = certificate model hash {cert.model_hash} differs from {model_hash(cfg.model)}")
    for c in rep.checked:
        lines.append(f"{c}: checked {rep.checked[c]} violations {rep.violations[c]} worst {_num(rep.worst[c])}")
    if cert.grams:
        lines.append(f"gram_min_eig = {min(g.min_eig() for g in cert.grams.values()):.6g}")
    if n > 0:
        cont = containment_check(m, cert, n, s)
        lines.append(f"containment: nominal_outside_safe {cont.nominal_outside_safe} "
                     f"safe_outside_box {cont.safe_outside_box} strict {cont.safe_not_nominal}")
    body = "\n".join(lines) + "\n"
    if out is not None:
        write_atomic(out / "verify_report.txt", render_output(cfg, body, {"certificate": str(p)}))
    print(body, end="")
    bad = rep.total_violations > 0 or (n > 0 and not cont.ok)
    return EXIT_VIOLATIONS if bad else EXIT_OK


def _run(cfg: RunConfig, cert, baseline: bool):
    m = build_model(cfg.model)
    return run_scenario(cfg.plant, cfg.controller, cert, m, baseline=baseline, filter_tol=cfg.filter_tol)


def _metrics(tr) -> list:
    s = tr.summary()
    return [("max_i_norm", s["max_i_norm"]), ("toggle_count", s["toggle_count"]),
            ("max_delta_u", s["max_delta_u"]), ("convergence_time", s["convergence_time"]),
            ("last_nonzero_du_time", s["last_nonzero_du_time"]), ("infeasible_steps", s["infeasible_steps"])]


def cmd_simulate(cfg: RunConfig, cert_path, baseline: bool, out: Path, t_end=None) -> int:
    if t_end is not None:
        cfg = replace(cfg, plant=replace(cfg.plant, t_end=t_end))
    baseline = baseline or cfg.scenario == "vcc_baseline"
    cfg = replace(cfg, scenario="vcc_baseline" if baseline else "safety_filter")
    cert = None
    extra = {}
    if not baseline or cert_path is not None:
        cert, p = _load_cert(cert_path, cfg)
        if cert.hash_mismatch:
            print(f"certificate model hash {cert.model_hash} does not match config {model_hash(cfg.model)}",
                  file=sys.stderr)
            return EXIT_HASH_MISMATCH
        extra = {"certificate": str(p), "certificate-sha256": certificate_digest(cert)}
    tr = _run(cfg, cert, baseline)
    write_atomic(out / f"trace_{cfg.scenario}.csv", render_output(cfg, tr.to_csv(), extra))
    body = "".join(f"{k} = {_num(v)}\n" for k, v in _metrics(tr))
    write_atomic(out / f"metrics_{cfg.scenario}.txt", render_output(cfg, body, extra))
    print(body, end="")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, cert_path, out: Path, t_end=None) -> int:
    if cfg.scenario == "vcc_baseline":
        raise UsageError("compare needs the safety-filter scenario; the config selects vcc_baseline only")
    if t_end is not None:
        cfg = replace(cfg, plant=replace(cfg.plant, t_end=t_end))
    cert, p = _load_cert(cert_path, cfg)
    if cert.hash_mismatch:
        print(f"certificate model hash {cert.model_hash} does not match config {model_hash(cfg.model)}",
              file=sys.stderr)
        return EXIT_HASH_MISMATCH
    extra = {"certificate": str(p), "certificate-sha256": certificate_digest(cert)}
    with ThreadPoolExecutor(max_workers=min(2, _threads())) as pool:
        fut_f = pool.submit(_run, cfg, cert, False)
        fut_b = pool.submit(_run, cfg, cert, True)
        tr_f, tr_b = fut_f.result(), fut_b.result()
    for name, tr in (("safety_filter", tr_f), ("vcc_baseline", tr_b)):
        c = replace(cfg, scenario=name)
        write_atomic(out / f"trace_{name}.csv", render_output(c, tr.to_csv(), extra))
    mf, mb = _metrics(tr_f), _metrics(tr_b)
    rows = [("metric", "safety_filter", "vcc_baseline")]
    rows += [(k, _num(a), _num(b)) for (k, a), (_, b) in zip(mf, mb)]
    ok = tr_f.max_delta_u < tr_b.max_delta_u
    body = _table(rows) + f"ordering max_delta_u filter < baseline: {'pass' if ok else 'fail'}\n"
    write_atomic(out / "compare.txt", render_output(cfg, body, extra))
    print(body, end="")
    return EXIT_OK if ok else EXIT_VIOLATIONS


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safefilter", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat section.key = value settings file")
        sp.add_argument("--out", default="out", help="output directory")

    s = sub.add_parser("synthesize", help="run the alternating SOS synthesis")
    common(s)
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s = sub.add_parser("verify", help="sampled check of a certificate")
    common(s)
    s.add_argument("--certificate")
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s = sub.add_parser("simulate", help="run the load-step scenario")
    common(s)
    s.add_argument("--certificate")
    s.add_argument("--baseline", action="store_true", help="use the vector current control")
    s.add_argument("--t-end", type=float)
    s = sub.add_parser("compare", help="safety filter against the baseline")
    common(s)
    s.add_argument("--certificate")
    s.add_argument("--t-end", type=float)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        if getattr(args, "samples", None) is not None and args.samples < 0:
            raise UsageError("--samples must be non-negative")
        if args.command == "synthesize":
            return cmd_synthesize(cfg, out, args.samples, args.seed)
        if args.command == "verify":
            return cmd_verify(cfg, args.certificate, out, args.samples, args.seed)
        if args.command == "simulate":
            if args.t_end is not None and not args.t_end > 0:
                raise UsageError("--t-end must be positive")
            return cmd_simulate(cfg, args.certificate, args.baseline, out, args.t_end)
        return cmd_compare(cfg, args.certificate, out, args.t_end)
    except (UsageError, ConfigurationError, CertificateFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
