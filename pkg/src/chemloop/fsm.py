"""Deterministic finite state machines with replayable transition history.

A :class:`StateMachine` is the immutable five-tuple (states, symbols,
transitions, initial, accepting).  A :class:`MachineCursor` walks it and keeps
an ordered history of :class:`TransitionRecord` entries.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping


class UndefinedTransition(Exception):
    """Raised when a symbol has no transition from the current state."""

    def __init__(self, state: str, symbol: str):
        super().__init__(f"no transition from {state!r} on {symbol!r}")
        self.state = state
        self.symbol = symbol


class UnknownSymbol(UndefinedTransition):
    """Raised when a symbol is not declared by the machine at all."""


@dataclass(frozen=True)
class StateMachine:
    states: frozenset[str]
    symbols: frozenset[str]
    transitions: Mapping[tuple[str, str], str]
    initial: str
    accepting: frozenset[str]
    # declaration order, kept so serialization is stable and readable
    state_order: tuple[str, ...] = field(default=(), compare=False)
    symbol_order: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def build(
        cls,
        states: Iterable[str],
        symbols: Iterable[str],
        transitions: Iterable[tuple[str, str, str]],
        initial: str,
        accepting: Iterable[str],
    ) -> "StateMachine":
        """Build a machine from ``(source, symbol, target)`` triples.

        Duplicate ``(source, symbol)`` keys with different targets raise
        ``ValueError`` since the transition relation must be a function.
        """
        states = list(dict.fromkeys(states))
        symbols = list(dict.fromkeys(symbols))
        table: dict[tuple[str, str], str] = {}
        for src, sym, dst in transitions:
            if table.get((src, sym), dst) != dst:
                raise ValueError(f"nondeterministic transition at ({src!r}, {sym!r})")
            table[(src, sym)] = dst
        return cls(
            states=frozenset(states),
            symbols=frozenset(symbols),
            transitions=dict(table),
            initial=initial,
            accepting=frozenset(accepting),
            state_order=tuple(states),
            symbol_order=tuple(symbols),
        )

    def target(self, state: str, symbol: str) -> str | None:
        return self.transitions.get((state, symbol))

    def outgoing(self, state: str) -> dict[str, str]:
        return {sym: dst for (src, sym), dst in self.transitions.items() if src == state}

    def ordered_states(self) -> list[str]:
        extra = sorted(self.states - set(self.state_order))
        return [s for s in self.state_order if s in self.states] + extra

    def ordered_symbols(self) -> list[str]:
        extra = sorted(self.symbols - set(self.symbol_order))
        return [s for s in self.symbol_order if s in self.symbols] + extra

    def to_dict(self) -> dict[str, Any]:
        """Serialize to the ``state_machine`` block of a task plan."""
        nested: dict[str, dict[str, str]] = {}
        for (src, sym), dst in self.transitions.items():
            nested.setdefault(src, {})[sym] = dst
        order = {s: i for i, s in enumerate(self.ordered_states())}
        return {
            "states": self.ordered_states(),
            "input_symbols": self.ordered_symbols(),
            "initial_state": self.initial,
            "accepting_states": sorted(self.accepting, key=lambda s: order.get(s, len(order))),
            "transitions": {
                src: dict(sorted(nested[src].items()))
                for src in sorted(nested, key=lambda s: order.get(s, len(order)))
            },
        }

    @classmethod
    def from_dict(cls, block: Mapping[str, Any]) -> "StateMachine":
        triples = [
            (src, sym, dst)
            for src, row in block["transitions"].items()
            for sym, dst in row.items()
        ]
        return cls.build(
            block["states"],
            block["input_symbols"],
            triples,
            block["initial_state"],
            block["accepting_states"],
        )


@dataclass(frozen=True)
class TransitionRecord:
    source: str
    symbol: str
    target: str
    timestamp: float
    emitter: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "from": self.source,
            "symbol": self.symbol,
            "to": self.target,
            "timestamp": self.timestamp,
            "emitter": self.emitter,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TransitionRecord":
        return cls(d["from"], d["symbol"], d["to"], float(d["timestamp"]), d["emitter"])


@dataclass
class MachineCursor:
    machine: StateMachine
    current: str = ""
    history: list[TransitionRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.current:
            self.current = self.machine.initial

    def step(self, symbol: str, timestamp: float = 0.0, emitter: str = "") -> str:
        return step(self, symbol, timestamp, emitter)

    @property
    def accepting(self) -> bool:
        return is_accepting(self)


def step(cursor: MachineCursor, symbol: str, timestamp: float = 0.0, emitter: str = "") -> str:
    """Fire ``symbol`` on the cursor and return the new state.

    Raises
    ------
    UnknownSymbol
        ``symbol`` is not part of the machine's alphabet.
    UndefinedTransition
        The current state has no transition on ``symbol``.
    ValueError
        ``timestamp`` is earlier than the last recorded transition.
    """
    machine = cursor.machine
    if symbol not in machine.symbols:
        raise UnknownSymbol(cursor.current, symbol)
    target = machine.target(cursor.current, symbol)
    if target is None:
        raise UndefinedTransition(cursor.current, symbol)
    if cursor.history and timestamp < cursor.history[-1].timestamp:
        raise ValueError("transition timestamps must be non-decreasing")
    cursor.history.append(TransitionRecord(cursor.current, symbol, target, timestamp, emitter))
    cursor.current = target
    return target


def is_accepting(cursor: MachineCursor) -> bool:
    return cursor.current in cursor.machine.accepting


def replay(machine: StateMachine, symbols: Iterable[str]) -> str:
    """Fold ``symbols`` over the transition table starting at the initial state."""
    state = machine.initial
    for sym in symbols:
        nxt = machine.target(state, sym)
        if nxt is None:
            raise UndefinedTransition(state, sym)
        state = nxt
    return state


def reachable(machine: StateMachine) -> set[str]:
    seen = {machine.initial}
    queue = deque([machine.initial])
    while queue:
        state = queue.popleft()
        for dst in machine.outgoing(state).values():
            if dst not in seen:
                seen.add(dst)
                queue.append(dst)
    return seen


def validate(machine: StateMachine) -> list[str]:
    """Return human-readable diagnostics; an empty list means the machine is sound."""
    problems: list[str] = []
    if machine.initial not in machine.states:
        problems.append(f"dangling reference: initial state {machine.initial!r} not in states")
    for acc in sorted(machine.accepting - machine.states):
        problems.append(f"dangling reference: accepting state {acc!r} not in states")
    for (src, sym), dst in sorted(machine.transitions.items()):
        if src not in machine.states:
            problems.append(f"dangling reference: transition source {src!r} not in states")
        if dst not in machine.states:
            problems.append(f"dangling reference: transition target {dst!r} not in states")
        if sym not in machine.symbols:
            problems.append(f"dangling reference: symbol {sym!r} not in input symbols")
    if machine.initial in machine.states:
        seen = reachable(machine)
        for acc in sorted(machine.accepting & machine.states):
            if acc not in seen:
                problems.append(f"unreachable accepting state {acc!r}")
    return problems
