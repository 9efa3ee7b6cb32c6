"""Rotation equivariance and invariance audit of a built model.

Probes are random tensors pushed through a float64 copy of the model, so the
reported deviations measure the construction rather than float32 rounding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, precision
from .nn import gap
from .rm import EMBEDDING
from .model import BASELINE, RELAXED, STRICT
from .rotation import rot90_exact

SPAN_TOL = 1e-5
GAP_TOL = 1e-5
END_TO_END_TOL = 1e-4

PASS, FAIL, NA, INFO = "PASS", "FAIL", "N/A", "INFO"


@dataclass
class Finding:
    prop: str
    max_dev: float | None
    tol: float | None
    status: str
    note: str = ""

    def to_line(self) -> str:
        dev = "none" if self.max_dev is None else f"{self.max_dev:.3e}"
        tol = "none" if self.tol is None else f"{self.tol:g}"
        line = f"property={self.prop} max_dev={dev} tol={tol} status={self.status}"
        return line + (f' note="{self.note}"' if self.note else "")


@dataclass
class AuditReport:
    structure: str
    findings: list[Finding]

    @property
    def failed(self) -> bool:
        return any(f.status == FAIL for f in self.findings)

    def lines(self) -> list[str]:
        return [f"structure={self.structure}"] + [f.to_line() for f in self.findings] + \
               [f"verdict={FAIL if self.failed else PASS}"]


def probe_turns(theta: float) -> list[int]:
    """Quarter turns q in 1..3 whose angle 90q is a multiple of theta, i.e. lies in the rotation group."""
    return [q for q in (1, 2, 3) if abs((90 * q / theta) - round(90 * q / theta)) < 1e-9]


def _max_dev(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max())


def audit(model, probes: int = 4, seed: int = 0) -> AuditReport:
    graph = model.graph
    rng = np.random.default_rng(seed)
    with precision(np.float64), no_grad():
        m = copy.deepcopy(model).astype(np.float64)
        cfg = graph.rm
        findings: list[Finding] = []
        image = rng.normal(size=(probes,) + tuple(graph.input_shape))
        if graph.label == BASELINE:
            dev = _end_to_end(m, image, [1, 2, 3])
            findings.append(Finding("end_to_end_logits", dev, None, INFO, "baseline model: no RM span"))
            return AuditReport(BASELINE, findings)

        turns = probe_turns(cfg.theta_degrees) if cfg.rotate else [1, 2, 3]
        if not turns:
            findings.append(Finding("span_equivariance", None, SPAN_TOL, NA,
                                    f"no quarter turn lies in the {cfg.theta_degrees:g}-degree group"))
            return AuditReport(graph.label, findings)

        z = Tensor(rng.normal(size=(probes,) + tuple(graph.extents()[graph.rm_span[0]])))
        span_dev = max(_max_dev(m.span_output(rot90_exact(z, q)).data,
                                rot90_exact(m.span_output(z), q).data) for q in turns)
        gap_dev = max(_max_dev(gap(m.span_output(rot90_exact(z, q))).data, gap(m.span_output(z)).data)
                      for q in turns)
        reason = _broken_by_design(cfg)
        if reason:
            findings.append(Finding("span_equivariance", span_dev, SPAN_TOL, INFO, reason))
            findings.append(Finding("gap_invariance", gap_dev, GAP_TOL, INFO, reason))
            findings.append(Finding("end_to_end_invariance", _end_to_end(m, image, turns), END_TO_END_TOL,
                                    INFO, reason))
            return AuditReport(graph.label, findings)

        findings.append(Finding("span_equivariance", span_dev, SPAN_TOL, _verdict(span_dev, SPAN_TOL)))
        findings.append(Finding("gap_invariance", gap_dev, GAP_TOL, _verdict(gap_dev, GAP_TOL)))
        if graph.label == STRICT:
            # logits computed from the span input onward, for any start of the span
            logit_dev = max(_max_dev(_logits_from_span(m, rot90_exact(z, q)), _logits_from_span(m, z))
                            for q in turns)
            findings.append(Finding("span_input_logits_invariance", logit_dev, SPAN_TOL,
                                    _verdict(logit_dev, SPAN_TOL)))
        if graph.full_trunk:
            dev = _end_to_end(m, image, turns)
            findings.append(Finding("end_to_end_invariance", dev, END_TO_END_TOL, _verdict(dev, END_TO_END_TOL)))
        else:
            note = ("relaxed RM-GAP: layers after the span break invariance" if graph.label == RELAXED
                    else "span starts after the stem: input rotations do not commute with the layers before it")
            findings.append(Finding("end_to_end_invariance", _end_to_end(m, image, turns), END_TO_END_TOL, NA, note))
        return AuditReport(graph.label, findings)


def _broken_by_design(cfg) -> str:
    if cfg.fusion == EMBEDDING:
        return "not rotation-invariant by construction (embedding fusion)"
    if not cfg.rotate:
        return "rotations disabled (RM-WR): no equivariance expected"
    if not cfg.share_weights:
        return "independent branch weights (RM-NWS): no equivariance expected"
    return ""


def _verdict(dev: float, tol: float) -> str:
    return PASS if dev < tol else FAIL


def _logits_from_span(m, z: Tensor) -> np.ndarray:
    f = gap(m.after_span(m.span_output(z)))
    return m.head_from_features(Tensor(f.data.reshape(f.shape[0], -1)))[1].data


def _end_to_end(m, image: np.ndarray, turns: list[int]) -> float:
    x = Tensor(image)
    ref = m(x).data
    return max(_max_dev(m(rot90_exact(x, q)).data, ref) for q in turns)
