"""Executor port and the scripted reference executor used with the simulator."""

from __future__ import annotations

from typing import Any, Protocol, Sequence

from .scenarios import Action, Scenario


class ExecutorError(RuntimeError):
    """The executor port failed; the episode is marked failed-with-error."""


class ExecutorPort(Protocol):
    def propose(self, bundle: Any) -> str | None:
        """Next macro intent as a short description, or None when finished."""
        ...

    def own_actions(self) -> Sequence[Action]:
        """Primitives the executor would run for its current intent when not steered."""
        ...

    def step_done(self) -> None: ...

    def notify_blocked(self, message: str) -> None: ...


class ScriptedExecutor:
    """Walks a fixed list of (intent text, primitives) in order.

    It proposes the text of the current intent; the runtime either realizes a
    tree macro for it or asks for ``own_actions``. Either way the intent is
    consumed by ``step_done``. Gate messages are kept but do not change the
    script.
    """

    def __init__(self, intents: Sequence[tuple[str, Sequence[Any]]]) -> None:
        self.intents = [(text, tuple(actions)) for text, actions in intents]
        self.pointer = 0
        self.messages: list[str] = []

    @classmethod
    def for_scenario(cls, scenario: Scenario) -> ScriptedExecutor:
        return cls([(ps.text, ps.step.actions) for ps in scenario.episode])

    def propose(self, bundle: Any) -> str | None:
        if self.pointer >= len(self.intents):
            return None
        return self.intents[self.pointer][0]

    def own_actions(self) -> Sequence[Action]:
        if self.pointer >= len(self.intents):
            raise ExecutorError("no current intent")
        return self.intents[self.pointer][1]

    def step_done(self) -> None:
        self.pointer += 1

    def notify_blocked(self, message: str) -> None:
        self.messages.append(message)
