"""Multi-modal task prompts over a closed template grammar.

The grammar is intentionally closed: templates carry placeholders for the
source task, a sequence requirement (identity / reverse / replace), an
optional constrained-skill scope and a context magnitude. Because every
realization is a fixed string, a rule-based parser recovers the exact
bindings, giving the learned translation models an independent oracle.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import GrammarError, PromptBuildError, TemplateError, ValidationError
from .vocab import SRC_MARKER
from .world import (
    SKILL_GERUNDS,
    SKILL_NAMES,
    SPEED_LEVELS,
    Trajectory,
    WIND_LEVELS,
)

ALL_SKILLS = "all"

SENSOR_WINDOW = 3  # steps per sensor snippet


@dataclass(frozen=True)
class TaskTransform:
    kind: str  # identity | reverse | replace
    src: int | None = None
    dst: int | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "reverse", "replace"):
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if self.kind == "replace":
            if self.src is None or self.dst is None:
                raise ValidationError("replace transform needs src and dst ids")
            if not (0 <= self.src < len(SKILL_NAMES) and 0 <= self.dst < len(SKILL_NAMES)):
                raise ValidationError("replace ids outside skill vocabulary")
            if self.src == self.dst:
                # replace(k -> k) normalizes to identity
                object.__setattr__(self, "kind", "identity")
                object.__setattr__(self, "src", None)
                object.__setattr__(self, "dst", None)


IDENTITY = TaskTransform("identity")


def apply_transform(skills: list[int], transform: TaskTransform) -> list[int]:
    if transform.kind == "identity":
        return list(skills)
    if transform.kind == "reverse":
        return list(reversed(skills))
    if transform.src not in skills:
        raise ValidationError(f"replace source {transform.src} absent from {skills}")
    return [transform.dst if s == transform.src else s for s in skills]


def invert_transform(transform: TaskTransform) -> TaskTransform:
    """The transform that maps a target order back to its source order."""
    if transform.kind == "replace":
        return TaskTransform("replace", src=transform.dst, dst=transform.src)
    return transform


@dataclass
class PromptBindings:
    src_task: list[int]
    seq_req: TaskTransform = IDENTITY
    constrained_sk: int | str = ALL_SKILLS
    magnitude: str | None = None  # wind or speed token, None for plain templates

    def __post_init__(self):
        if not self.src_task:
            raise ValidationError("src_task must be non-empty")
        if self.constrained_sk != ALL_SKILLS and self.constrained_sk not in self.src_task:
            raise ValidationError("constrained skill must be in src_task or 'all'")


@dataclass(frozen=True)
class Template:
    template_id: int
    text: str
    factor: str | None  # "speed", "wind" or None (no context clause)


TEMPLATES: list[Template] = [
    Template(0, "Do {SRC_TASK}, under {SEQ_REQ}. Furthermore, for {CONSTRAINED_SK} the speed {MAGNITUDE} is applied.", "speed"),
    Template(1, "When undertaking {SRC_TASK}, ensure {SEQ_REQ} and adapt the speed {MAGNITUDE} for {CONSTRAINED_SK}.", "speed"),
    Template(2, "While carrying out {SRC_TASK}, comply with {SEQ_REQ} and apply the speed {MAGNITUDE} to {CONSTRAINED_SK}.", "speed"),
    Template(3, "{SRC_TASK} is performed with {SEQ_REQ}, and the speed {MAGNITUDE} holds during {CONSTRAINED_SK}.", "speed"),
    Template(4, "During {SRC_TASK}, {SEQ_REQ} is maintained as the wind {MAGNITUDE} blows.", "wind"),
    Template(5, "While performing {SRC_TASK} and following {SEQ_REQ}, the wind {MAGNITUDE} blows.", "wind"),
    Template(6, "The wind {MAGNITUDE} blows during {SRC_TASK}, while adhering to {SEQ_REQ}.", "wind"),
    Template(7, "{SEQ_REQ} is upheld while {SRC_TASK} and the {MAGNITUDE} wind blows.", "wind"),
    Template(8, "Do the actions presented in this {SRC_TASK}, following {SEQ_REQ}.", None),
    Template(9, "Carry out {SRC_TASK}, following {SEQ_REQ}.", None),
    Template(10, "Do the actions presented in this {SRC_TASK}, following {SEQ_REQ}. The {MAGNITUDE} wind blows.", "wind"),
    Template(11, "Sequentially follow {SRC_TASK} under {SEQ_REQ}, but during {CONSTRAINED_SK}, the speed {MAGNITUDE} is applied.", "speed"),
]

TEMPLATE_BY_ID = {t.template_id: t for t in TEMPLATES}

_SEQ_NONE = "the sequential order"
_SEQ_REVERSE = "in reverse order"


def _seq_req_text(transform: TaskTransform) -> str:
    if transform.kind == "identity":
        return _SEQ_NONE
    if transform.kind == "reverse":
        return _SEQ_REVERSE
    return f"replace {SKILL_GERUNDS[transform.src]} with {SKILL_GERUNDS[transform.dst]}"


def _src_task_text(bindings: PromptBindings, carried_by_text: bool) -> str:
    if carried_by_text:
        return " then ".join(SKILL_NAMES[s] for s in bindings.src_task)
    return SRC_MARKER


def _constrained_text(constrained: int | str) -> str:
    if constrained == ALL_SKILLS:
        return "all skills"
    return SKILL_GERUNDS[constrained]


def instantiate_template(
    template: int | str | Template,
    bindings: PromptBindings,
    src_carried_by_text: bool = False,
) -> str:
    """Substitute every placeholder; unbound placeholders raise."""
    if isinstance(template, int):
        template = TEMPLATE_BY_ID[template]
    text = template.text if isinstance(template, Template) else template
    factor = template.factor if isinstance(template, Template) else None

    values = {
        "SRC_TASK": _src_task_text(bindings, src_carried_by_text),
        "SEQ_REQ": _seq_req_text(bindings.seq_req),
        "CONSTRAINED_SK": _constrained_text(bindings.constrained_sk),
    }
    if bindings.magnitude is not None:
        if factor == "speed" and bindings.magnitude not in SPEED_LEVELS:
            raise TemplateError(f"{bindings.magnitude!r} is not a speed magnitude")
        if factor == "wind" and bindings.magnitude not in WIND_LEVELS:
            raise TemplateError(f"{bindings.magnitude!r} is not a wind magnitude")
        values["MAGNITUDE"] = bindings.magnitude

    out = text
    for name, value in values.items():
        out = out.replace("{" + name + "}", value)
    missing = re.findall(r"\{([A-Z_]+)\}", out)
    if missing:
        raise TemplateError(f"unbound placeholders {missing} in template")
    return out


_GERUND_ALT = "|".join(re.escape(g) for g in SKILL_GERUNDS)
_REPLACE_RE = re.compile(rf"replace ({_GERUND_ALT}) with ({_GERUND_ALT})")


def parse_seq_req(text: str) -> TaskTransform:
    """Recover the sequence requirement from closed-grammar text."""
    text = text.lower()
    if _SEQ_REVERSE in text:
        return TaskTransform("reverse")
    if "replace" in text:
        m = _REPLACE_RE.search(text)
        if not m:
            raise GrammarError(f"malformed replace clause in {text!r}")
        src = SKILL_GERUNDS.index(m.group(1))
        dst = SKILL_GERUNDS.index(m.group(2))
        return TaskTransform("replace", src=src, dst=dst)
    if "reverse" in text:
        raise GrammarError(f"malformed reverse clause in {text!r}")
    return IDENTITY


_WIND_RE = re.compile(r"the wind (\w+) blows|the (\w+) wind blows")
_SPEED_RE = re.compile(r"speed (\w+)")


def parse_context_clause(text: str) -> tuple[int | str | None, str, str]:
    """Recover (constrained_sk, factor, magnitude) from closed-grammar text.

    Wind clauses always scope to all skills. Returns (None, "none", "none")
    when the text carries no context clause.
    """
    # The replace clause contains gerunds; remove it before scope search.
    stripped = _REPLACE_RE.sub("", text.lower())

    m = _SPEED_RE.search(stripped)
    if m:
        magnitude = m.group(1)
        if magnitude not in SPEED_LEVELS:
            raise GrammarError(f"unknown speed magnitude {magnitude!r}")
        if "all skills" in stripped:
            return ALL_SKILLS, "speed", magnitude
        found = [i for i, g in enumerate(SKILL_GERUNDS) if g in stripped]
        if len(found) != 1:
            raise GrammarError(f"cannot resolve constrained skill in {text!r}")
        return found[0], "speed", magnitude

    m = _WIND_RE.search(stripped)
    if m:
        magnitude = m.group(1) or m.group(2)
        if magnitude not in WIND_LEVELS:
            raise GrammarError(f"unknown wind magnitude {magnitude!r}")
        return ALL_SKILLS, "wind", magnitude

    if "wind" in stripped or "speed" in stripped:
        raise GrammarError(f"malformed context clause in {text!r}")
    return None, "none", "none"


@dataclass
class Snippet:
    modality: str  # video | sensor | text
    payload: object

    def __post_init__(self):
        if self.modality == "video":
            ok = isinstance(self.payload, np.ndarray) and self.payload.ndim == 2
        elif self.modality == "sensor":
            ok = (
                isinstance(self.payload, tuple)
                and len(self.payload) == 2
                and all(isinstance(p, np.ndarray) for p in self.payload)
            )
        elif self.modality == "text":
            ok = isinstance(self.payload, str)
        else:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if not ok:
            raise ValidationError(f"payload does not match modality {self.modality!r}")


@dataclass
class TaskPrompt:
    snippets: list[Snippet] = field(default_factory=list)

    def __post_init__(self):
        if not self.snippets:
            raise ValidationError("prompt must contain at least one snippet")

    def text_parts(self) -> list[str]:
        return [s.payload for s in self.snippets if s.modality == "text"]


def build_text_prompt(
    bindings: PromptBindings, template_id: int | None = None, seed: int = 0
) -> TaskPrompt:
    """Prompt whose source task is carried inline by the text itself."""
    rng = np.random.default_rng(seed)
    template = _pick_template(bindings, template_id, rng)
    text = instantiate_template(template, bindings, src_carried_by_text=True)
    return TaskPrompt([Snippet("text", text)])


def _pick_template(bindings, template_id, rng) -> Template:
    if template_id is not None:
        return TEMPLATE_BY_ID[template_id]
    if bindings.magnitude is None:
        pool = [t for t in TEMPLATES if t.factor is None]
    elif bindings.magnitude in SPEED_LEVELS:
        pool = [t for t in TEMPLATES if t.factor == "speed"]
    else:
        pool = [t for t in TEMPLATES if t.factor == "wind"]
    return pool[int(rng.integers(len(pool)))]


def build_prompt(
    traj: Trajectory,
    bindings: PromptBindings,
    modality_plan: list[str] | None,
    seed: int = 0,
    template_id: int | None = None,
) -> TaskPrompt:
    """Assemble a prompt from a source demonstration plus a clause snippet.

    ``modality_plan`` assigns one carrier (video/sensor) per source segment;
    None carries the whole source task in text instead.
    """
    rng = np.random.default_rng(seed)
    if modality_plan is None:
        return build_text_prompt(bindings, template_id=template_id, seed=seed)

    if traj.task != list(bindings.src_task):
        raise PromptBuildError(
            f"demo trajectory executes {traj.task}, bindings say {bindings.src_task}"
        )
    if len(modality_plan) != len(bindings.src_task):
        raise PromptBuildError("modality plan must cover every source segment")

    demo_snippets = []
    for (skill, start, end), modality in zip(traj.skill_segments, modality_plan):
        seg_len = end - start
        if modality == "video":
            if seg_len < 1:
                raise PromptBuildError(f"segment for skill {skill} is empty")
            demo_snippets.append(Snippet("video", traj.observations[start:end]))
        elif modality == "sensor":
            if seg_len < SENSOR_WINDOW:
                raise PromptBuildError(
                    f"segment for skill {skill} shorter than sensor window"
                )
            off = start + int(rng.integers(seg_len - SENSOR_WINDOW + 1))
            demo_snippets.append(
                Snippet(
                    "sensor",
                    (
                        traj.states[off : off + SENSOR_WINDOW],
                        traj.actions[off : off + SENSOR_WINDOW],
                    ),
                )
            )
        else:
            raise PromptBuildError(f"plan modality must be video or sensor, got {modality!r}")

    template = _pick_template(bindings, template_id, rng)
    text = Snippet("text", instantiate_template(template, bindings, src_carried_by_text=False))
    # Text may lead or trail the demonstration; both orders are in-grammar.
    if rng.uniform() < 0.25:
        return TaskPrompt([text] + demo_snippets)
    return TaskPrompt(demo_snippets + [text])


def harvest_vocab_tokens() -> list[str]:
    """All tokens the closed grammar, labels and serializations can produce."""
    from .vocab import PLAN, SEP, SRC_MARKER as MARKER, tokenize

    tokens: set[str] = set()
    for tpl in TEMPLATES:
        tokens.update(tokenize(re.sub(r"\{[A-Z_]+\}", " ", tpl.text)))
    for phrase in (_SEQ_NONE, _SEQ_REVERSE, "replace", "with", "all skills", "then", "and"):
        tokens.update(tokenize(phrase))
    for name in SKILL_NAMES + SKILL_GERUNDS:
        tokens.update(tokenize(name))
    tokens.update(WIND_LEVELS)
    tokens.update(SPEED_LEVELS)
    tokens.update({"wind", "speed", "none", "(", ")", ","})
    tokens.update({tokenize(MARKER)[0], SEP, PLAN})
    return sorted(tokens)
