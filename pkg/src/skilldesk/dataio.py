"""Line-delimited record formats: trajectory datasets, prompt files, manifests.

One trajectory (or prompt) per line, floats at full repr precision. A
dataset file ``X.jsonl`` is accompanied by a sidecar manifest ``X.manifest.json``
carrying the skill-id/label mapping and the generation config fingerprint.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .prompts import PromptBindings, Snippet, TaskPrompt, TaskTransform
from .world import SKILL_NAMES, DomainContext, Trajectory


def _traj_record(traj: Trajectory) -> dict:
    steps = [
        [s.tolist(), a.tolist(), v.tolist(), int(l)]
        for s, a, v, l in zip(traj.states, traj.actions, traj.observations, traj.labels)
    ]
    return {
        "steps": steps,
        "context": traj.context.to_dict(),
        "segments": [list(seg) for seg in traj.skill_segments],
        "seed": traj.seed,
    }


def _traj_from_record(rec: dict) -> Trajectory:
    steps = rec["steps"]
    return Trajectory(
        states=np.array([s[0] for s in steps]),
        actions=np.array([s[1] for s in steps]),
        observations=np.array([s[2] for s in steps]),
        labels=np.array([s[3] for s in steps], dtype=np.int64),
        context=DomainContext.from_dict(rec["context"]),
        skill_segments=[tuple(seg) for seg in rec["segments"]],
        seed=rec.get("seed", 0),
    )


def write_dataset(
    path: str | Path, trajectories: list[Trajectory], gen_config: dict | None = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(_traj_record(traj)) + "\n")
    manifest = {
        "skills": {str(i): name for i, name in enumerate(SKILL_NAMES)},
        "trajectories": len(trajectories),
        "generation": gen_config or {},
    }
    manifest_path = path.with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | Path) -> tuple[list[Trajectory], dict]:
    path = Path(path)
    trajectories = [_traj_from_record(json.loads(line)) for line in path.open()]
    manifest_path = path.with_suffix(".manifest.json")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return trajectories, manifest


def _snippet_record(snippet: Snippet) -> dict:
    if snippet.modality == "video":
        payload = snippet.payload.tolist()
    elif snippet.modality == "sensor":
        payload = {
            "states": snippet.payload[0].tolist(),
            "actions": snippet.payload[1].tolist(),
        }
    else:
        payload = snippet.payload
    return {"modality": snippet.modality, "payload": payload}


def _snippet_from_record(rec: dict) -> Snippet:
    if rec["modality"] == "video":
        return Snippet("video", np.array(rec["payload"]))
    if rec["modality"] == "sensor":
        return Snippet(
            "sensor",
            (np.array(rec["payload"]["states"]), np.array(rec["payload"]["actions"])),
        )
    return Snippet("text", rec["payload"])


def _bindings_record(b: PromptBindings) -> dict:
    return {
        "src_task": list(b.src_task),
        "seq_req": {"kind": b.seq_req.kind, "src": b.seq_req.src, "dst": b.seq_req.dst},
        "constrained_sk": b.constrained_sk,
        "magnitude": b.magnitude,
    }


def _bindings_from_record(rec: dict) -> PromptBindings:
    sr = rec["seq_req"]
    return PromptBindings(
        src_task=list(rec["src_task"]),
        seq_req=TaskTransform(sr["kind"], src=sr.get("src"), dst=sr.get("dst")),
        constrained_sk=rec["constrained_sk"],
        magnitude=rec.get("magnitude"),
    )


def write_prompts(
    path: str | Path,
    prompts: list[tuple[TaskPrompt, PromptBindings, str]],
) -> Path:
    """Each entry is (prompt, bindings, source_traj_ref)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for prompt, bindings, ref in prompts:
            rec = {
                "snippets": [_snippet_record(s) for s in prompt.snippets],
                "bindings": _bindings_record(bindings),
                "source_traj_ref": ref,
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def read_prompts(path: str | Path) -> list[tuple[TaskPrompt, PromptBindings, str]]:
    out = []
    for line in Path(path).open():
        rec = json.loads(line)
        prompt = TaskPrompt([_snippet_from_record(s) for s in rec["snippets"]])
        out.append((prompt, _bindings_from_record(rec["bindings"]), rec["source_traj_ref"]))
    return out


def validate_dataset_nonempty(trajectories: list[Trajectory]):
    if not trajectories:
        raise ValidationError("dataset is empty")
