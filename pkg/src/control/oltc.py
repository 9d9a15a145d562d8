"""On-load tap changer deadband automaton."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from src.grid.network import Network, TapChanger, TapVector
from src.powerflow.solver import PowerFlowSolution

logger = logging.getLogger(__name__)

DEFAULT_MAX_TAP_ITERATIONS = 20


@dataclass(frozen=True)
class OltcState:
    """
    Automaton state of one tap changer.

    `side` is +1 while the voltage is below the deadband, -1 above, 0 inside; the
    violation counter only accumulates while the side stays the same.
    """

    position: int
    violation_counter: int = 0
    side: int = 0
    saturated: bool = False


def initial_states(net: Network) -> Dict[str, OltcState]:
    return {tid: OltcState(tc.position) for tid, tc in net.tap_changers.items()}


def oltc_step(state: OltcState, tc: TapChanger, v_measured: float) -> Tuple[OltcState, int]:
    """
    Advance the automaton by one simulation step.

    Args:
        state: Current state
        tc: Tap changer parameters
        v_measured: Voltage at the regulated (LV) bus in per-unit

    Returns:
        Tuple[OltcState, int]: New state and the tap delta in {-1, 0, +1};
            +1 raises the LV voltage
    """
    deviation = v_measured - tc.v_setpoint
    # on the deadband edge nothing happens
    if abs(deviation) <= tc.deadband:
        return OltcState(state.position), 0

    side = 1 if deviation < 0 else -1
    counter = state.violation_counter + 1 if state.side == side else 1
    if counter < tc.delay_steps:
        return OltcState(state.position, counter, side, False), 0

    target = state.position + side
    if not tc.within_bounds(target):
        if not state.saturated:
            logger.warning(
                f"Tap changer saturated at position {state.position} "
                f"(v={v_measured:.4f}, setpoint {tc.v_setpoint:.4f})"
            )
        return OltcState(state.position, counter, side, True), 0
    return OltcState(target, 0, side, False), side


@dataclass
class QuiescenceResult:
    solution: PowerFlowSolution
    taps: TapVector
    states: Dict[str, OltcState]
    iterations: int
    moves: int = 0
    oscillation: bool = False
    quiescent: bool = True
    trace: List[TapVector] = field(default_factory=list)

    @property
    def saturated(self) -> List[str]:
        return sorted(tid for tid, s in self.states.items() if s.saturated)


def run_oltc_to_quiescence(
    net: Network,
    solve: Callable[[TapVector], PowerFlowSolution],
    states: Mapping[str, OltcState],
    automatic: Optional[Sequence[str]] = None,
    taps: Optional[Mapping[str, int]] = None,
    max_iterations: int = DEFAULT_MAX_TAP_ITERATIONS,
) -> QuiescenceResult:
    """
    Alternate power flow and tap automata until no tap changer acts.

    A changer that acted may act again within the same step; one that is still waiting
    for its delay carries its counter over to the next step. A tap vector repeating the
    one from two iterations before (A -> B -> A) stops the loop at B.

    Args:
        net: Network with the tap changers
        solve: Power flow for a given tap vector, typically a coupled_power_flow closure
        states: Automaton state per tap changer
        automatic: Ids of the changers run by their automaton; all when omitted
        taps: Starting tap vector; taken from the states when omitted
        max_iterations: Limit on power flow evaluations

    Returns:
        QuiescenceResult: Final solution, taps and automaton states
    """
    states = dict(states)
    current: TapVector = dict(net.taps)
    current.update({tid: s.position for tid, s in states.items()})
    if taps:
        current.update(taps)
    for tid, pos in current.items():
        if tid in states and states[tid].position != pos:
            states[tid] = replace(states[tid], position=int(pos))

    active = list(automatic) if automatic is not None else sorted(net.tap_changers)
    trace: List[TapVector] = [dict(current)]
    moves = 0
    sol = solve(dict(current))
    for iteration in range(1, max_iterations + 1):
        acted = []
        for tid in active:
            t = net.transformer(tid)
            state = states.get(tid, OltcState(current[tid]))
            state, delta = oltc_step(state, t.tap, sol.voltage(t.lv_bus))
            states[tid] = state
            if delta:
                current[tid] = state.position
                acted.append(tid)
        if not acted:
            return QuiescenceResult(sol, dict(current), states, iteration, moves, trace=trace)

        moves += len(acted)
        if len(trace) >= 2 and trace[-2] == current:
            logger.warning(f"Tap oscillation detected between {trace[-1]} and {current}, holding {trace[-1]}")
            previous = trace[-1]
            for tid in acted:
                states[tid] = OltcState(previous[tid])
            return QuiescenceResult(sol, dict(previous), states, iteration, moves, oscillation=True, trace=trace)
        trace.append(dict(current))
        active = acted
        sol = solve(dict(current))

    logger.warning(f"Tap changers still moving after {max_iterations} iterations")
    return QuiescenceResult(sol, dict(current), states, max_iterations, moves, quiescent=False, trace=trace)
