"""Tool executors: scripted fixtures, builtin image tools, vignette lookups, remote."""

from __future__ import annotations

import hashlib
import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from ..errors import ToolFailure
from ..trajectory import canonical_json
from .images import ImageStore, crop_normalized

WILDCARD = "*"


def arguments_hash(arguments: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(dict(arguments)).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ToolResult:
    text: str
    image_ref: str | None = None
    image_array: np.ndarray | None = None


@dataclass
class ToolContext:
    """What an executor may see about the running episode."""

    sample_id: str
    resolve_image: Callable[[str], str]
    images: ImageStore
    next_round: int
    vignette: Any = None


class Executor(Protocol):
    name: str
    backend: str

    def __call__(self, arguments: dict, ctx: ToolContext) -> ToolResult: ...


class ToolFixtures:
    """Scripted tool outputs keyed by ``(sample_id, tool, arguments_hash)``.

    ``*`` is accepted for ``sample_id`` and ``arguments_hash`` as a fallback;
    exact keys win over wildcards.
    """

    def __init__(self, entries: Mapping[tuple[str, str, str], ToolResult] | None = None):
        self._entries: dict[tuple[str, str, str], ToolResult] = dict(entries or {})

    def add(self, sample_id: str, tool: str, arguments: Mapping[str, Any] | str, text: str,
            produced_image: str | None = None) -> None:
        h = arguments if isinstance(arguments, str) else arguments_hash(arguments)
        self._entries[(sample_id, tool, h)] = ToolResult(text, produced_image)

    def lookup(self, sample_id: str, tool: str, arguments: Mapping[str, Any]) -> ToolResult | None:
        h = arguments_hash(arguments)
        for key in ((sample_id, tool, h), (sample_id, tool, WILDCARD), (WILDCARD, tool, h), (WILDCARD, tool, WILDCARD)):
            if key in self._entries:
                return self._entries[key]
        return None

    def __len__(self) -> int:
        return len(self._entries)

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> "ToolFixtures":
        fx = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                fx.add(row["sample_id"], row["tool"], row["arguments_hash"], row["observation_text"],
                       row.get("produced_image"))
        return fx

    def dump(self, path: str | os.PathLike) -> None:
        """Write the fixtures in the JSONL layout read by :meth:`from_jsonl`."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for (sid, tool, h), res in sorted(self._entries.items()):
                row = {"sample_id": sid, "tool": tool, "arguments_hash": h, "observation_text": res.text}
                if res.image_ref is not None:
                    row["produced_image"] = res.image_ref
                fh.write(canonical_json(row) + "\n")


class ScriptedExecutor:
    backend = "scripted"

    def __init__(self, name: str, fixtures: ToolFixtures):
        self.name = name
        self.fixtures = fixtures

    def __call__(self, arguments: dict, ctx: ToolContext) -> ToolResult:
        hit = self.fixtures.lookup(ctx.sample_id, self.name, arguments)
        if hit is None:
            raise ToolFailure(f"{self.name} produced no output for these arguments")
        return hit


class ZoomInExecutor:
    """Real crop on the 0-1000 normalized grid."""

    name = "ZoomInSubfigure"
    backend = "builtin"

    def __call__(self, arguments: dict, ctx: ToolContext) -> ToolResult:
        image_id = arguments.get("image", "img_last")
        ref = ctx.resolve_image(image_id)
        crop = crop_normalized(ctx.images.get(ref), arguments.get("param"))
        h, w = crop.shape[:2]
        new_ref = f"{ctx.sample_id}/img_round_{ctx.next_round}.png"
        return ToolResult(f"Zoomed into {arguments.get('param')} of {image_id}; crop is {w}x{h} pixels.",
                          new_ref, crop)


class VignetteExecutor:
    """RequestPhysicalExam / RequestTest answered verbatim from the vignette."""

    backend = "builtin"

    def __init__(self, name: str, kind: str, argument: str):
        self.name = name
        self.kind = kind
        self.argument = argument

    def __call__(self, arguments: dict, ctx: ToolContext) -> ToolResult:
        if ctx.vignette is None:
            raise ToolFailure("no patient vignette loaded")
        return ToolResult(ctx.vignette.lookup(self.kind, arguments[self.argument]))


class RemoteExecutor:
    """POSTs ``{tool, sample_id, arguments}`` and expects ``{observation_text}`` back."""

    backend = "remote"

    def __init__(self, name: str, endpoint: str, timeout: float = 30.0):
        self.name = name
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, arguments: dict, ctx: ToolContext) -> ToolResult:
        body = json.dumps({"tool": self.name, "sample_id": ctx.sample_id, "arguments": arguments}).encode()
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ToolFailure(f"{self.name} request failed: {exc}") from None
        text = payload.get("observation_text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise ToolFailure(f"{self.name} returned no observation_text")
        return ToolResult(text, payload.get("produced_image"))


def default_executors(environment_id: str, fixtures: ToolFixtures | None = None) -> dict[str, Executor]:
    """Executor map whose names cover exactly the environment's step tools."""
    from .specs import get_spec

    fixtures = fixtures or ToolFixtures()
    spec = get_spec(environment_id)
    out: dict[str, Executor] = {}
    for name in sorted(spec.step_tools):
        if environment_id == "interleaved" and name == "ZoomInSubfigure":
            out[name] = ZoomInExecutor()
        elif environment_id == "simulation" and name == "RequestPhysicalExam":
            out[name] = VignetteExecutor(name, "exam", "exam")
        elif environment_id == "simulation" and name == "RequestTest":
            out[name] = VignetteExecutor(name, "test", "test")
        elif environment_id == "collaboration":
            continue  # stages are answered by policies, see collaboration.py
        else:
            out[name] = ScriptedExecutor(name, fixtures)
    return out
