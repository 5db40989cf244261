""" Verification protocol engine.

Checks are plain functions returning a ``FlagEntry``. A ``ValidationProtocol`` groups
them into a tree of named components, queues one call per payload and tabulates the
resulting flags; components can be selected or skipped by name at construction.
"""
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
import enum
import functools
from pathlib import Path
from typing import Callable, Iterator, Optional, TypedDict

import pandas as pd
from loguru import logger as log


@functools.total_ordering
class FlagCode(enum.Enum):
    """Outcome of a single check, ordered by severity.

    DEV_UNHANDLED > HALT > RED > GREEN > INFO > SKIPPED
    """

    DEV_UNHANDLED = 90
    """The check function itself raised"""
    HALT = 80
    """Non-finite values; the checked code is unusable"""
    RED = 50
    """Error above tolerance"""
    GREEN = 20
    INFO = 10
    """Nothing was assessed, e.g. a protocol where every check was skipped"""
    SKIPPED = 1

    def __lt__(self, other):
        if not isinstance(other, FlagCode):
            return NotImplemented
        return self.value < other.value


class FlagEntry(TypedDict):
    code: FlagCode
    message: str


@dataclass(eq=False)
class Component:
    name: str
    description: str = ""
    parent: Optional["Component"] = field(default=None, repr=False)
    skip: bool = False
    skip_children: bool = False
    """Propagates to every descendant"""
    children: list["Component"] = field(default_factory=list, repr=False)
    flags: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.parent is not None:
            self.parent.children.append(self)

    @property
    def path(self) -> tuple[str, ...]:
        return (*self.parent.path, self.name) if self.parent is not None else (self.name,)

    def walk(self) -> Iterator["Component"]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class QueuedCheck:
    fcn: Callable[..., FlagEntry]
    payload: dict
    config: dict
    component: Component
    description: str
    to_run: bool

    @property
    def function(self) -> str:
        return self.fcn.__name__

    def execute(self, flag_unhandled_exceptions: bool) -> dict:
        kwargs = self.payload | self.config
        row = {"description": self.description, "function": self.function, "kwargs": kwargs, "config": self.config}
        if not self.to_run:
            return row | {"code": FlagCode.SKIPPED, "message": "Skipped by protocol"}
        try:
            result = self.fcn(**kwargs)
        except Exception as e:
            where = "/".join(self.component.path)
            if not flag_unhandled_exceptions:
                raise RuntimeError(f"Check {self.function} in {where} failed: {e}") from e
            log.warning(f"Check {self.function} in {where} raised {type(e).__name__}: {e}")
            return row | {"code": FlagCode.DEV_UNHANDLED, "message": str(e)}
        log.debug(f"{self.component.name}/{self.description}: {result['code'].name}")
        return row | dict(result)


class _Everything(list):
    """Default run list: contains every component name."""

    def __contains__(self, _):
        return True

    def __repr__(self):
        return "ALL_COMPONENTS"


class ValidationProtocol:
    """A tree of components, each holding queued checks.

    Example::

        vp = ValidationProtocol(skip_components=["Hopfield"])
        with vp.component_start(name="Primitives", description="autodiff ops"):
            with vp.payload(payloads=[{"op": "relu"}, {"op": "sigmoid"}]):
                vp.add(check_primitive_gradient, config={"tolerance": 1e-4})
        vp.run()
        vp.report()["flag_table"]

    Args:
        skip_components: names whose checks (and descendants' checks) are skipped.
        run_components: if given, only these components (and their descendants) run.
            A component named here runs even when an ancestor is skipped.
    """

    class Report(TypedDict):
        flag_table: pd.DataFrame
        """One row per flag, indexed by component path tuples"""

    COL_ORDER = ["description", "function", "code", "message", "code_level", "kwargs", "config"]

    def __init__(self, skip_components: list = None, run_components: list = None):
        self.run_components = run_components if run_components is not None else _Everything()
        self.skip_components = skip_components if skip_components is not None else list()
        self.root = Component(name="ROOT")
        self.cur_component = self.root
        self._payloads: list[dict] = list()
        self._queue: list[QueuedCheck] = list()

    def _apply_selection(self, component: Component, skip: bool):
        named_in_run = component.name in self.run_components and not isinstance(self.run_components, _Everything)
        if named_in_run and not skip:
            return
        forced = skip or component.name in self.skip_components or component.parent.skip_children
        outside_run = not any(name in self.run_components for name in component.path)
        component.skip = forced or outside_run
        component.skip_children = forced

    @contextmanager
    def component_start(self, name: str, description: str, skip: bool = False):
        """Nest a new component under the current one for the duration of the block."""
        component = Component(name=name, description=description, parent=self.cur_component)
        log.trace(f"Component {'/'.join(component.path)}")
        self._apply_selection(component, skip)
        self.cur_component = component
        try:
            yield component
        finally:
            self.cur_component = component.parent

    @contextmanager
    def payload(self, payloads: list[dict]):
        """Checks added inside the block are queued once per payload."""
        self._payloads = payloads
        try:
            yield
        finally:
            self._payloads = list()

    def add(
        self,
        fcn: Callable[..., FlagEntry],
        payloads: dict = None,
        skip: bool = False,
        config: dict = None,
        description: str = None,
    ):
        """Queue ``fcn`` for each payload of the enclosing block, or once for a direct ``payloads`` dict.

        ``config`` holds keyword arguments shared by every payload.
        """
        for payload in [payloads] if payloads else self._payloads:
            self._queue.append(
                QueuedCheck(
                    fcn=fcn,
                    payload=payload,
                    config=config if config is not None else dict(),
                    component=self.cur_component,
                    description=description if description is not None else fcn.__name__,
                    to_run=not (skip or self.cur_component.skip),
                )
            )
        return self

    def queued_checks(self, include_individual_checks: bool = True, include_skipped_components: bool = False) -> str:
        """Print-friendly tree of components with direct and total check counts."""
        direct = Counter(check.component for check in self._queue)
        lines = list()
        for component in self.root.walk():
            if component.skip and not include_skipped_components:
                continue
            label = f"{' ' * (len(component.path) - 1)}↳'{component.name}'{'-> !SKIPPED!' if component.skip else ''}"
            total = sum(direct[c] for c in component.walk())
            lines.append(f"{label : <55}DIRECT:[{direct[component] : >4}] ALL:[{total : >5}]")
            if include_individual_checks:
                to_run = Counter(c.description for c in self._queue if c.component is component and c.to_run)
                lines.extend(f"  > {d} x {n}" if n > 1 else f"  > {d}" for d, n in to_run.items())
        return "\n".join(lines)

    def run(self, flag_unhandled_exceptions: bool = False):
        """Execute every queued check; with ``flag_unhandled_exceptions`` a raising check becomes DEV_UNHANDLED."""
        for check in self._queue:
            check.component.flags.append(check.execute(flag_unhandled_exceptions))
        log.info(f"Ran {sum(c.to_run for c in self._queue)} of {len(self._queue)} queued checks")

    def report(self, include_skipped: bool = True) -> "ValidationProtocol.Report":
        paths, rows = list(), list()
        for component in self.root.walk():
            for flag in component.flags:
                if flag["code"] == FlagCode.SKIPPED and not include_skipped:
                    continue
                paths.append(component.path)
                rows.append(
                    flag
                    | {
                        "message": flag["message"].replace("\n", "::NEWLINE::"),
                        "code_level": flag["code"].value,
                    }
                )
        if not rows:
            return {"flag_table": pd.DataFrame(columns=self.COL_ORDER)}
        index = pd.Index(paths, dtype=object, tupleize_cols=False)
        return {"flag_table": pd.DataFrame(rows, index=index)[self.COL_ORDER]}

    def worst_code(self) -> FlagCode:
        """Most severe executed flag, INFO when nothing ran."""
        codes = [flag["code"] for c in self.root.walk() for flag in c.flags if flag["code"] != FlagCode.SKIPPED]
        return max(codes, default=FlagCode.INFO)


def write_flag_table(df: pd.DataFrame, path: Path) -> Path:
    """Tab separated; component path joined with '/' and codes written by name."""
    out = df.drop(columns=["kwargs", "config"])
    out.index = pd.Index(["/".join(index) for index in df.index], name="component")
    out = out.assign(code=out["code"].map(lambda c: c.name))
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, sep="\t")
    log.info(f"Wrote flag table to {path}")
    return path
