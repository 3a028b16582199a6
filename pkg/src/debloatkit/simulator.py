"""Page-permission runtime simulation.

Functions are placed onto fixed-size pages; a run starts with every page
non-executable and flips permissions as prediction scopes activate.  Each
scope-entry event predicts a function set, activates its pages, and installs
gates at the callsites that could leave the prediction.  Executing a gated
callsite toward a function outside the prediction fires the gate whether or
not the target page happens to be executable through sharing: a bounded
history of adjacent callsite pairs is checked against the static ensue
relation, and all pairs valid means a tolerable misprediction (the scope
widens to its full static set) while any invalid pair means an attack.
A call that reaches a non-executable page with no gate armed ends the run
as a page fault.

Verdicts: ``clean`` (trace ran to completion), ``attack`` (history check
failed at a gate), ``fault`` (ungated call to an inactive page), and
``malformed`` (the event stream itself is inconsistent).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .ensue import EnsueDb, check_pair
from .ir import Call, EnterScg, Program, Return, Trace
from .predictor import PredictorModel
from .scopes import (
    ATTACH_FRAME,
    AnalysisResult,
    Scg,
    iter_activations,
    runtime_gates,
)

VERDICT_CLEAN = "clean"
VERDICT_ATTACK = "attack"
VERDICT_FAULT = "fault"
VERDICT_MALFORMED = "malformed"

EXIT_CODES = {
    VERDICT_CLEAN: 0,
    VERDICT_ATTACK: 3,
    VERDICT_FAULT: 4,
    VERDICT_MALFORMED: 5,
}

LAYOUT_DECLARATION = "declaration"
LAYOUT_COLOCATE = "colocate"

PREDICT_MODEL = "model"
PREDICT_FALLBACK = "fallback"
PREDICT_ADVERSARIAL = "adversarial"
PREDICT_ORACLE = "oracle"

MIN_HISTORY = 2
MAX_HISTORY = 16


@dataclass(frozen=True)
class Layout:
    """Where every function's bytes live, at page granularity."""

    page_size: int
    placements: dict[str, tuple[int, ...]]
    n_pages: int

    def pages_of(self, fns: Iterable[str]) -> list[int]:
        out: list[int] = []
        for f in fns:
            out.extend(self.placements[f])
        return out


def _next_fit(p: Program, order: Sequence[str]) -> Layout:
    ps = p.page_size
    cursor = 0
    placements: dict[str, tuple[int, ...]] = {}
    for fn_id in order:
        size = max(1, p.function(fn_id).size_bytes)
        room = ps - (cursor % ps)
        if size > room and cursor % ps != 0:
            cursor += room  # skip to the next page boundary
        start = cursor
        cursor += size
        placements[fn_id] = tuple(range(start // ps, (cursor - 1) // ps + 1))
    n_pages = (cursor + ps - 1) // ps if cursor else 1
    return Layout(page_size=ps, placements=placements, n_pages=n_pages)


def layout_functions(
    p: Program, mode: str = LAYOUT_DECLARATION, analysis: AnalysisResult | None = None
) -> Layout:
    """Assign pages by next-fit over an ordering of the functions.

    ``declaration`` keeps document order.  ``colocate`` chains functions by
    how often they appear in the same predicted set (weighted by support),
    so a prediction tends to flip fewer pages; it needs an analysis and
    falls back to declaration order without one.
    """
    if mode == LAYOUT_DECLARATION or analysis is None:
        if mode not in (LAYOUT_DECLARATION, LAYOUT_COLOCATE):
            raise ValueError(f"unknown layout mode: {mode!r}")
        return _next_fit(p, [f.id for f in p.functions])
    if mode != LAYOUT_COLOCATE:
        raise ValueError(f"unknown layout mode: {mode!r}")
    decl = {f.id: n for n, f in enumerate(p.functions)}
    weight: dict[tuple[str, str], int] = {}
    total: dict[str, int] = {f.id: 0 for f in p.functions}
    for pscgs in analysis.pscgs.values():
        for ps_ in pscgs:
            members = sorted(ps_.functions)
            for i, a in enumerate(members):
                total[a] = total.get(a, 0) + ps_.support
                for b in members[i + 1 :]:
                    key = (a, b)
                    weight[key] = weight.get(key, 0) + ps_.support
    remaining = set(decl)
    order: list[str] = []
    current = min(remaining, key=lambda f: (-total.get(f, 0), decl[f]))
    while True:
        order.append(current)
        remaining.discard(current)
        if not remaining:
            break
        current = min(
            remaining,
            key=lambda f: (
                -weight.get((min(current, f), max(current, f)), 0),
                decl[f],
            ),
        )
    return _next_fit(p, order)


class PageMap:
    """Reference-counted executable pages over a layout."""

    def __init__(self, layout: Layout):
        self.layout = layout
        self.refcounts = [0] * layout.n_pages

    def activate(self, fns: Iterable[str]) -> tuple[str, ...]:
        held = tuple(fns)
        for pg in self.layout.pages_of(held):
            self.refcounts[pg] += 1
        return held

    def deactivate(self, fns: Iterable[str]) -> None:
        for pg in self.layout.pages_of(fns):
            if self.refcounts[pg] <= 0:
                raise AssertionError("page refcount underflow")
            self.refcounts[pg] -= 1

    def executable(self, fn_id: str) -> bool:
        return all(self.refcounts[pg] > 0 for pg in self.layout.placements[fn_id])

    def surface_active(self, fn_id: str) -> bool:
        return any(self.refcounts[pg] > 0 for pg in self.layout.placements[fn_id])

    @property
    def neutral(self) -> bool:
        return all(r == 0 for r in self.refcounts)


@dataclass(frozen=True)
class SimConfig:
    predictor: str = PREDICT_MODEL
    layout: str = LAYOUT_DECLARATION
    history: int = MIN_HISTORY
    rp_mode: str = "eager"
    surface: bool = True

    def validated(self) -> "SimConfig":
        if self.predictor not in (
            PREDICT_MODEL,
            PREDICT_FALLBACK,
            PREDICT_ADVERSARIAL,
            PREDICT_ORACLE,
        ):
            raise ValueError(f"unknown predictor mode: {self.predictor!r}")
        if self.layout not in (LAYOUT_DECLARATION, LAYOUT_COLOCATE):
            raise ValueError(f"unknown layout mode: {self.layout!r}")
        if not MIN_HISTORY <= self.history <= MAX_HISTORY:
            raise ValueError(
                f"history must be within [{MIN_HISTORY}, {MAX_HISTORY}]"
            )
        if self.rp_mode == "lazy":
            raise NotImplementedError(
                "lazy rectification (activating one function per gate hit) is "
                "reserved; only eager full-set rectification is implemented"
            )
        if self.rp_mode != "eager":
            raise ValueError(f"unknown rp mode: {self.rp_mode!r}")
        return self


@dataclass
class Metrics:
    """Outcome and counters of one simulated run."""

    verdict: str = VERDICT_CLEAN
    detail: str = ""
    n_events: int = 0
    n_calls: int = 0
    predicts: int = 0
    fallbacks: int = 0
    rectifies: int = 0
    ensue_checks: int = 0
    attacks_detected: int = 0
    faults: int = 0
    refcount_neutral: bool = False
    surface_min: float = 0.0
    surface_avg: float = 0.0
    surface_max: float = 0.0

    @property
    def pct_rectifies(self) -> float:
        return 100.0 * self.rectifies / self.predicts if self.predicts else 0.0

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]


class _Surface:
    """Time-weighted attack-surface samples, clocked by event index.

    A sample records the surface right after a permission change; its weight
    is the distance to the next distinct timestamp.  Same-timestamp samples
    collapse to the last one, and zero-width samples (possible only at the
    final event) are excluded from the min/max.
    """

    def __init__(self, p: Program, pages: PageMap, enabled: bool):
        self.enabled = enabled
        self.pages = pages
        self.total = max(1, p.total_gadgets)
        self.gadgets = {f.id: f.gadget_count for f in p.functions}
        self.samples: list[tuple[int, float]] = []

    def sample(self, ts: int) -> None:
        if not self.enabled:
            return
        active = sum(
            g for fn, g in self.gadgets.items() if self.pages.surface_active(fn)
        )
        reduction = 100.0 * (1.0 - active / self.total)
        if self.samples and self.samples[-1][0] == ts:
            self.samples[-1] = (ts, reduction)
        else:
            self.samples.append((ts, reduction))

    def finalize(self, last_ts: int) -> tuple[float, float, float]:
        if not self.enabled or not self.samples:
            return (0.0, 0.0, 0.0)
        weighted: list[tuple[float, float]] = []
        for i, (ts, r) in enumerate(self.samples):
            end = self.samples[i + 1][0] if i + 1 < len(self.samples) else last_ts
            weighted.append((float(max(0, end - ts)), r))
        span = sum(w for w, _ in weighted)
        if span <= 0:
            r = self.samples[-1][1]
            return (r, r, r)
        avg = sum(w * r for w, r in weighted) / span
        visible = [r for w, r in weighted if w > 0]
        return (min(visible), avg, max(visible))


@dataclass
class _Activation:
    scg: Scg
    predicted: frozenset[str]
    gates: frozenset[int]
    held: list[tuple[str, ...]] = field(default_factory=list)
    closed: bool = False


class _OraclePredictor:
    """Replays the executed sets of a clean reference run, in entry order."""

    def __init__(self, p: Program, analysis: AnalysisResult, reference: Trace):
        self.queues: dict[int, deque[frozenset[str]]] = {}
        samples = sorted(
            iter_activations(p, analysis.scgs, reference), key=lambda s: s.start
        )
        for s in samples:
            self.queues.setdefault(s.scg, deque()).append(s.executed)

    def predict(self, scg_id: int) -> frozenset[str] | None:
        q = self.queues.get(scg_id)
        return q.popleft() if q else None


def run(
    p: Program,
    trace: Trace,
    analysis: AnalysisResult,
    db: EnsueDb,
    model: PredictorModel | None = None,
    config: SimConfig | None = None,
    layout: Layout | None = None,
    reference: Trace | None = None,
) -> Metrics:
    """Simulate one trace under the page-permission runtime.

    ``model`` is required in ``model`` predictor mode; ``reference`` (a clean
    trace of the same program) is required in ``oracle`` mode and defaults to
    the trace itself, which is only meaningful for known-clean input.
    """
    config = (config or SimConfig()).validated()
    if config.predictor == PREDICT_MODEL and model is None:
        raise ValueError("model predictor mode needs a trained model")
    if layout is None:
        layout = layout_functions(p, config.layout, analysis)
    pages = PageMap(layout)
    surface = _Surface(p, pages, config.surface)
    m = Metrics(n_events=len(trace.events))
    scg_by_id = {s.id: s for s in analysis.scgs}
    pscg_by_label = {
        scg_id: {ps.id: ps.functions for ps in pscgs}
        for scg_id, pscgs in analysis.pscgs.items()
    }
    oracle = (
        _OraclePredictor(p, analysis, reference if reference is not None else trace)
        if config.predictor == PREDICT_ORACLE
        else None
    )

    history: deque[int] = deque(maxlen=config.history)
    frames: list[tuple[str, list[_Activation]]] = []
    pending: list[_Activation] = []
    open_acts: list[_Activation] = []
    last_ts = max(0, len(trace.events) - 1)

    def close_activation(act: _Activation, ts: int) -> None:
        if act.closed:
            return
        act.closed = True
        changed = False
        for held in act.held:
            pages.deactivate(held)
            changed = True
        if changed:
            surface.sample(ts)

    def finish(verdict: str, detail: str, ts: int) -> Metrics:
        m.verdict = verdict
        m.detail = detail
        m.refcount_neutral = pages.neutral
        m.surface_min, m.surface_avg, m.surface_max = surface.finalize(last_ts)
        return m

    def predict_set(
        scg: Scg, features: tuple[int, ...]
    ) -> tuple[frozenset[str], bool]:
        """Returns (function set, came_from_fallback)."""
        if config.predictor == PREDICT_FALLBACK:
            return scg.functions, True
        if config.predictor == PREDICT_ADVERSARIAL:
            options = analysis.pscgs.get(scg.id, ())
            if not options:
                return scg.functions, True
            worst = min(options, key=lambda ps_: (len(ps_.functions), ps_.id))
            return worst.functions, False
        if config.predictor == PREDICT_ORACLE:
            assert oracle is not None
            got = oracle.predict(scg.id)
            if got is None:
                return scg.functions, True
            return got, False
        assert model is not None
        label = model.predict(scg.id, features)
        if label is None:
            return scg.functions, True
        fns = pscg_by_label.get(scg.id, {}).get(label)
        if fns is None:
            return scg.functions, True
        return fns, False

    surface.sample(0)
    for idx, ev in enumerate(trace.events):
        if isinstance(ev, EnterScg):
            scg = scg_by_id.get(ev.entry)
            if scg is None:
                return finish(
                    VERDICT_MALFORMED, f"event {idx}: unknown scope id {ev.entry}", idx
                )
            predicted, from_fallback = predict_set(scg, ev.features)
            if from_fallback:
                m.fallbacks += 1
            else:
                m.predicts += 1
            act = _Activation(
                scg=scg,
                predicted=predicted,
                gates=runtime_gates(p, scg, predicted),
            )
            act.held.append(pages.activate(predicted))
            surface.sample(idx)
            open_acts.append(act)
            if scg.attach == ATTACH_FRAME and frames:
                frames[-1][1].append(act)
            else:
                pending.append(act)
        elif isinstance(ev, Call):
            m.n_calls += 1
            callee = ev.callee
            if callee not in p.function_map:
                return finish(
                    VERDICT_MALFORMED, f"event {idx}: unknown function '{callee}'", idx
                )
            if ev.callsite != p.root_callsite and ev.callsite not in p.callsite_map:
                return finish(
                    VERDICT_MALFORMED,
                    f"event {idx}: unknown callsite {ev.callsite}",
                    idx,
                )
            history.append(ev.callsite)
            # Gates fire on execution of the callsite, not on the page
            # fault: with several functions per page the target can be
            # executable while the prediction is already wrong, and the
            # departure must be caught here for later calls to stay covered.
            gate = next(
                (
                    a
                    for a in reversed(open_acts)
                    if not a.closed
                    and ev.callsite in a.gates
                    and callee in a.scg.functions
                    and callee not in a.predicted
                ),
                None,
            )
            if gate is not None:
                pairs = list(zip(list(history), list(history)[1:]))
                m.ensue_checks += len(pairs)
                bad = next(
                    ((a, b) for a, b in pairs if not check_pair(db, a, b)), None
                )
                if bad is not None:
                    m.attacks_detected += 1
                    return finish(
                        VERDICT_ATTACK,
                        f"event {idx}: callsite pair ({bad[0]}, {bad[1]}) violates "
                        f"the ensue relation at gated callsite {ev.callsite}",
                        idx,
                    )
                widen = gate.scg.functions - gate.predicted
                gate.held.append(pages.activate(widen))
                gate.predicted = gate.scg.functions
                gate.gates = frozenset()
                m.rectifies += 1
                surface.sample(idx)
            if not pages.executable(callee):
                m.faults += 1
                return finish(
                    VERDICT_FAULT,
                    f"event {idx}: ungated call to inactive '{callee}' "
                    f"at callsite {ev.callsite}",
                    idx,
                )
            frames.append((callee, pending))
            pending = []
        elif isinstance(ev, Return):
            if pending:
                # A scope entry not followed by its call attaches to the
                # frame being closed, mirroring the profiling reader.
                if frames:
                    frames[-1][1].extend(pending)
                pending = []
            depth = next(
                (
                    n
                    for n in range(len(frames) - 1, -1, -1)
                    if frames[n][0] == ev.function
                ),
                None,
            )
            if depth is None:
                return finish(
                    VERDICT_MALFORMED,
                    f"event {idx}: return from '{ev.function}' with no such "
                    f"frame open",
                    idx,
                )
            # Unwind through abandoned frames (an undetected injected call
            # never returns on its own).
            while len(frames) > depth:
                _, acts = frames.pop()
                for act in acts:
                    close_activation(act, idx)
            # Activations close newest-first, so the closed ones sit at the
            # tail; dropping them keeps the per-call gate scan short on long
            # traces.
            while open_acts and open_acts[-1].closed:
                open_acts.pop()
        else:  # pragma: no cover - event types are closed
            return finish(VERDICT_MALFORMED, f"event {idx}: unknown event", idx)

    if frames:
        return finish(
            VERDICT_MALFORMED,
            f"trace ends with {len(frames)} unclosed frames",
            last_ts,
        )
    for act in open_acts:
        close_activation(act, last_ts)
    return finish(VERDICT_CLEAN, "trace completed", last_ts)


@dataclass(frozen=True)
class SuiteReport:
    """Aggregated outcomes over a batch of runs."""

    label: str
    runs: tuple[Metrics, ...]

    def count(self, verdict: str) -> int:
        return sum(1 for r in self.runs if r.verdict == verdict)

    @property
    def predicts(self) -> int:
        return sum(r.predicts for r in self.runs)

    @property
    def rectifies(self) -> int:
        return sum(r.rectifies for r in self.runs)

    @property
    def pct_rectifies(self) -> float:
        return 100.0 * self.rectifies / self.predicts if self.predicts else 0.0

    @property
    def surface_avg(self) -> float:
        if not self.runs:
            return 0.0
        return sum(r.surface_avg for r in self.runs) / len(self.runs)

    @property
    def surface_min(self) -> float:
        return min((r.surface_min for r in self.runs), default=0.0)

    @property
    def surface_max(self) -> float:
        return max((r.surface_max for r in self.runs), default=0.0)


def simulate_suite(
    p: Program,
    traces: Sequence[Trace],
    analysis: AnalysisResult,
    db: EnsueDb,
    model: PredictorModel | None = None,
    config: SimConfig | None = None,
    references: Sequence[Trace] | None = None,
    label: str = "suite",
) -> SuiteReport:
    """Run many traces under one layout and aggregate the outcomes."""
    config = (config or SimConfig()).validated()
    layout = layout_functions(p, config.layout, analysis)
    runs = []
    for n, t in enumerate(traces):
        ref = references[n] if references is not None else None
        runs.append(
            run(
                p,
                t,
                analysis,
                db,
                model=model,
                config=config,
                layout=layout,
                reference=ref,
            )
        )
    return SuiteReport(label=label, runs=tuple(runs))


def format_report(reports: Sequence[SuiteReport]) -> str:
    """Fixed-width table over suite aggregates, stable across runs."""
    header = (
        f"{'suite':<16} {'runs':>5} {'clean':>6} {'attack':>7} {'fault':>6} "
        f"{'malformed':>10} {'predicts':>9} {'rectifies':>10} {'%rect':>7} "
        f"{'surf min':>9} {'surf avg':>9} {'surf max':>9}"
    )
    lines = [header, "-" * len(header)]
    for rep in reports:
        lines.append(
            f"{rep.label:<16} {len(rep.runs):>5} {rep.count(VERDICT_CLEAN):>6} "
            f"{rep.count(VERDICT_ATTACK):>7} {rep.count(VERDICT_FAULT):>6} "
            f"{rep.count(VERDICT_MALFORMED):>10} {rep.predicts:>9} "
            f"{rep.rectifies:>10} {rep.pct_rectifies:>7.1f} "
            f"{rep.surface_min:>9.1f} {rep.surface_avg:>9.1f} {rep.surface_max:>9.1f}"
        )
    return "\n".join(lines) + "\n"
