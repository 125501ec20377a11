"""The question/program language.

Programs are s-expressions, e.g.
(count_relation (filter SCENE "lamp") (filter SCENE "table") "above");
parse/format round-trip on the canonical single-space form. Templates bind
English question patterns to program skeletons through typed slots and are
invertible: match_question recovers (template, bindings) from any generated
question text.
"""

import difflib
import json
import re
from dataclasses import dataclass, field as dfield
from importlib import resources

from .executor import (
    PNode, Program, SCENE_SYMBOL, clone_with_literals, program_hops, typecheck,
)
from .relations import BINARY_RELATIONS

# canonical relation name -> question surface phrase
RELATION_PHRASES = {
    "above": "above",
    "below": "below",
    "on the top of": "on the top of",
    "close": "close to",
    "far": "far from",
    "inside": "inside",
    "on the left": "on the left of",
    "on the right": "on the right of",
}
_PHRASE_TO_RELATION = {v: k for k, v in RELATION_PHRASES.items()}

_IRREGULAR_PLURALS = {"bookshelf": "bookshelves", "shelf": "shelves"}


class ParseError(ValueError):
    def __init__(self, message, pos):
        super().__init__(f"{message} at offset {pos}")
        self.pos = pos


class TemplateError(ValueError):
    pass


class MatchError(ValueError):
    pass


def pluralize(word: str) -> str:
    if word in _IRREGULAR_PLURALS:
        return _IRREGULAR_PLURALS[word]
    if re.search(r"(s|x|z|ch|sh)$", word):
        return word + "es"
    if re.search(r"[^aeiou]y$", word):
        return word[:-1] + "ies"
    return word + "s"


# ---------------------------------------------------------------------------
# lexer / parser


def _tokens(text):
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "()":
            yield (c, c, i)
            i += 1
        elif c == '"':
            j = text.find('"', i + 1)
            if j < 0:
                raise ParseError("unterminated string literal", i)
            yield ("str", text[i + 1:j], i)
            i = j + 1
        elif c == "-" or c.isdigit():
            m = re.match(r"-?\d+", text[i:])
            if not m:
                raise ParseError(f"bad token {c!r}", i)
            yield ("int", int(m.group()), i)
            i += m.end()
        else:
            m = re.match(r"[A-Za-z_][A-Za-z0-9_]*", text[i:])
            if not m:
                raise ParseError(f"bad character {c!r}", i)
            yield ("sym", m.group(), i)
            i += m.end()


def parse_program(text: str, check: bool = True) -> Program:
    """Parse (and by default type-check) a textual program."""
    toks = list(_tokens(text))
    pos = 0

    def parse_expr(at):
        nonlocal pos
        if pos >= len(toks):
            raise ParseError("unexpected end of input", at)
        kind, val, tpos = toks[pos]
        pos += 1
        if kind == "(":
            if pos >= len(toks) or toks[pos][0] != "sym":
                raise ParseError("expected operator symbol after '('", tpos)
            _, op, oppos = toks[pos]
            pos += 1
            args = []
            while pos < len(toks) and toks[pos][0] != ")":
                args.append(parse_expr(toks[pos][2]))
            if pos >= len(toks):
                raise ParseError("unbalanced parenthesis", len(text))
            pos += 1  # consume ')'
            return PNode("op", op=op, args=args, pos=oppos)
        if kind == ")":
            raise ParseError("unexpected ')'", tpos)
        if kind == "str":
            return PNode("str", value=val, pos=tpos)
        if kind == "int":
            return PNode("int", value=val, pos=tpos)
        if val == SCENE_SYMBOL:
            return PNode("scene", pos=tpos)
        raise ParseError(f"bare symbol {val!r} (only SCENE is allowed)", tpos)

    root = parse_expr(0)
    if pos != len(toks):
        raise ParseError("trailing input after program", toks[pos][2])
    if check:
        typecheck(root)
    return Program(root)


def format_program(program) -> str:
    """Canonical single-space s-expression text."""
    root = program.root if isinstance(program, Program) else program

    def fmt(node):
        if node.kind == "scene":
            return SCENE_SYMBOL
        if node.kind == "str":
            return f'"{node.value}"'
        if node.kind == "int":
            return str(node.value)
        inner = " ".join([node.op] + [fmt(a) for a in node.args])
        return f"({inner})"

    return fmt(root)


# ---------------------------------------------------------------------------
# templates


@dataclass
class Template:
    id: str
    pattern: str
    skeleton: str
    qtype: str
    hops: int
    answer_space: str  # yesno | count | concept
    slots: dict  # name -> "concept" | "relation"
    require_unique: list = dfield(default_factory=list)
    require_present: list = dfield(default_factory=list)

    def concept_slots(self):
        return [s for s, k in self.slots.items() if k == "concept"]

    def relation_slots(self):
        return [s for s, k in self.slots.items() if k == "relation"]


def _pattern_slot_names(pattern):
    names = set()
    for m in re.finditer(r"\{(\w+?)(s?)\}", pattern):
        names.add(m.group(1))
    return names


class TemplateSet:
    """Loaded templates plus the concept universe they instantiate over."""

    def __init__(self, templates, concepts):
        self.templates = list(templates)
        self.by_id = {t.id: t for t in self.templates}
        self.concepts = list(concepts)
        self._regexes = {t.id: self._compile(t) for t in self.templates}
        self._skeletons = {t.id: self._prepare_skeleton(t) for t in self.templates}
        self._validate()

    def _prepare_skeleton(self, t: Template):
        """Pre-parsed, pre-typed skeleton AST with {slot} literals left in."""
        raw = parse_program(t.skeleton, check=False).root
        dummies = {}
        for s, kind in t.slots.items():
            dummies["{%s}" % s] = "above" if kind == "relation" else self.concepts[0]
        typed = clone_with_literals(raw, dummies)
        typecheck(typed)

        def copy_types(src, dst):
            dst.type_ = src.type_
            for a, b in zip(src.args, dst.args):
                copy_types(a, b)

        copy_types(typed, raw)
        return raw

    def program_for(self, t: Template, bindings) -> Program:
        """Fast instantiation of the skeleton AST (no question text)."""
        sub = {"{%s}" % s: v for s, v in bindings.items()}
        return Program(clone_with_literals(self._skeletons[t.id], sub))

    def skeleton_program(self, template_id: str) -> Program:
        """The shared pre-typed skeleton AST ({slot} literals in place)."""
        return Program(self._skeletons[template_id])

    @staticmethod
    def literal_map(bindings) -> dict:
        return {"{%s}" % s: v for s, v in bindings.items()}

    @staticmethod
    def load(concepts, path=None):
        if path is None:
            raw = resources.files("voxreason.data").joinpath("templates.json").read_text()
        else:
            with open(path) as f:
                raw = f.read()
        templates = [Template(**d) for d in json.loads(raw)]
        return TemplateSet(templates, concepts)

    def _validate(self):
        for t in self.templates:
            pat_slots = _pattern_slot_names(t.pattern)
            skel_slots = _pattern_slot_names(t.skeleton)
            declared = set(t.slots)
            if pat_slots != declared or not skel_slots <= declared:
                raise TemplateError(
                    f"{t.id}: slot sets differ (pattern {sorted(pat_slots)}, "
                    f"skeleton {sorted(skel_slots)}, declared {sorted(declared)})"
                )
            # a sample instantiation must type-check with the declared hops
            bindings = {}
            cs = [c for c in self.concepts]
            for i, s in enumerate(t.concept_slots()):
                bindings[s] = cs[i % len(cs)]
            for s in t.relation_slots():
                bindings[s] = "above"
            _, prog = self.instantiate(t, bindings, validate_slots=False)
            if program_hops(prog.root) != t.hops:
                raise TemplateError(f"{t.id}: declared hops {t.hops} != program hops")

    def _compile(self, t: Template):
        concept_alt = "|".join(sorted(map(re.escape, self.concepts), key=len, reverse=True))
        plural_alt = "|".join(
            sorted((re.escape(pluralize(c)) for c in self.concepts), key=len, reverse=True)
        )
        rel_alt = "|".join(
            sorted((re.escape(p) for p in RELATION_PHRASES.values()), key=len, reverse=True)
        )
        out = []
        last = 0
        for m in re.finditer(r"\{(\w+?)(s?)\}", t.pattern):
            out.append(re.escape(t.pattern[last:m.start()]))
            name, plural = m.group(1), m.group(2) == "s"
            kind = t.slots[name]
            if kind == "concept":
                out.append(f"(?P<{name}>{plural_alt if plural else concept_alt})")
            else:
                out.append(f"(?P<{name}>{rel_alt})")
            last = m.end()
        out.append(re.escape(t.pattern[last:]))
        return re.compile("".join(out) + r"\Z")

    def instantiate(self, template, bindings, validate_slots=True):
        """-> (question text, type-checked Program)."""
        t = self.by_id[template] if isinstance(template, str) else template
        if validate_slots:
            for s, kind in t.slots.items():
                if s not in bindings:
                    raise TemplateError(f"{t.id}: missing binding for slot {s!r}")
                v = bindings[s]
                if kind == "concept" and v not in self.concepts:
                    raise TemplateError(f"{t.id}: slot {s!r} value {v!r} not a known concept")
                if kind == "relation" and v not in BINARY_RELATIONS:
                    raise TemplateError(f"{t.id}: slot {s!r} value {v!r} not a binary relation")
            extra = set(bindings) - set(t.slots)
            if extra:
                raise TemplateError(f"{t.id}: unknown slots {sorted(extra)}")

        def sub_pattern(m):
            name, plural = m.group(1), m.group(2) == "s"
            v = bindings[name]
            if t.slots[name] == "relation":
                return RELATION_PHRASES[v]
            return pluralize(v) if plural else v

        question = re.sub(r"\{(\w+?)(s?)\}", sub_pattern, t.pattern)
        return question, self.program_for(t, bindings)

    def match_question(self, text: str):
        """Inverse of instantiate -> (template id, bindings)."""
        plural_to_concept = {pluralize(c): c for c in self.concepts}
        hits = []
        for t in self.templates:
            m = self._regexes[t.id].match(text)
            if not m:
                continue
            bindings = {}
            ok = True
            for s, kind in t.slots.items():
                v = m.group(s)
                if kind == "concept":
                    bindings[s] = plural_to_concept.get(v, v)
                else:
                    bindings[s] = _PHRASE_TO_RELATION[v]
            cslots = t.concept_slots()
            if len({bindings[s] for s in cslots}) != len(cslots):
                ok = False  # generated questions never repeat a concept
            if ok:
                hits.append((t.id, bindings))
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise MatchError(f"ambiguous question matches templates {[h[0] for h in hits]}")
        near = difflib.get_close_matches(text, [t.pattern for t in self.templates], n=3, cutoff=0.0)
        raise MatchError(f"no template matches {text!r}; nearest patterns: {near}")
