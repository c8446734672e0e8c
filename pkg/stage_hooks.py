"""
Stage hooks for the PhyloGrid workflow
======================================
Callables registered against workflow stage names (regex matchers) that run
before and after each stage.

- PreStage hooks may veto the stage; the workflow then fails it with StageBlocked.
- PostStage hooks observe the outcome and the stage's artifact keys.

A hook that raises is reported and ignored; only an explicit veto blocks.
"""

from __future__ import annotations

import logging
import re
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Literal, Mapping, Optional, Tuple

LOG = logging.getLogger(__name__)

HookType = Literal["PreStage", "PostStage"]


@dataclass
class HookResult:
    """Result from executing a hook."""

    allowed: bool = True
    message: str = ""


HookFunction = Callable[..., Optional[HookResult]]


@dataclass
class HookDefinition:
    """Definition of a single hook."""

    hook_type: HookType
    matcher: str  # regex over stage names, "*" for all
    function: HookFunction
    source: str = "internal"


class StageBlocked(RuntimeError):
    """A PreStage hook vetoed the stage."""

    def __init__(self, stage: str, messages: List[str]):
        self.stage = stage
        self.messages = list(messages)
        detail = "; ".join(message for message in messages if message) or "vetoed by hook"
        super().__init__(f"Stage {stage} blocked: {detail}")


class HooksManager:
    """Manages hook execution around workflow stages."""

    def __init__(self) -> None:
        self.hooks: Dict[str, List[HookDefinition]] = defaultdict(list)
        self._lock = threading.Lock()

    def register_hook(self, hook: HookDefinition) -> None:
        with self._lock:
            self.hooks[hook.hook_type].append(hook)

    def register(self, hook_type: HookType, matcher: str, function: HookFunction, source: str = "internal") -> HookDefinition:
        hook = HookDefinition(hook_type, matcher, function, source)
        self.register_hook(hook)
        return hook

    def clear(self) -> None:
        with self._lock:
            self.hooks.clear()

    def _matches_pattern(self, stage: str, pattern: str) -> bool:
        if pattern == "*":
            return True
        try:
            return bool(re.match(pattern, stage))
        except re.error:
            return stage == pattern

    def _hooks_for(self, hook_type: HookType, stage: str) -> List[HookDefinition]:
        with self._lock:
            hooks = list(self.hooks.get(hook_type, []))
        return [hook for hook in hooks if self._matches_pattern(stage, hook.matcher)]

    def _call(self, hook: HookDefinition, **kwargs: Any) -> HookResult:
        try:
            result = hook.function(**kwargs)
        except Exception as exc:
            LOG.warning("%s hook from %s failed on %s: %s", hook.hook_type, hook.source, kwargs.get("stage"), exc)
            return HookResult(allowed=True, message=f"Hook function error: {exc}")
        return result if result is not None else HookResult()

    def run_pre_stage_hooks(self, run_id: str, stage: str, payload: Mapping[str, Any]) -> Tuple[bool, List[str]]:
        """
        Run all PreStage hooks for a stage.

        Returns:
            (allowed, messages): whether the stage should proceed and any messages
        """
        messages: List[str] = []
        for hook in self._hooks_for("PreStage", stage):
            result = self._call(hook, run_id=run_id, stage=stage, payload=payload, outcome=None)
            if result.message:
                messages.append(result.message)
            if not result.allowed:
                return False, messages
        return True, messages

    def run_post_stage_hooks(
        self,
        run_id: str,
        stage: str,
        payload: Mapping[str, Any],
        outcome: str,
    ) -> List[str]:
        messages: List[str] = []
        for hook in self._hooks_for("PostStage", stage):
            result = self._call(hook, run_id=run_id, stage=stage, payload=payload, outcome=outcome)
            if result.message:
                messages.append(result.message)
        return messages


_HOOKS_MANAGER: Optional[HooksManager] = None
_HOOKS_LOCK = threading.Lock()


def get_hooks_manager() -> HooksManager:
    """Get or create the process-wide hooks manager."""
    global _HOOKS_MANAGER
    with _HOOKS_LOCK:
        if _HOOKS_MANAGER is None:
            _HOOKS_MANAGER = HooksManager()
        return _HOOKS_MANAGER


def reset_hooks_manager() -> None:
    """Reset the process-wide hooks manager (mainly for testing)."""
    global _HOOKS_MANAGER
    with _HOOKS_LOCK:
        _HOOKS_MANAGER = None
