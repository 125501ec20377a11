"""Question-answering evaluation and the accuracy report."""

import json
from dataclasses import dataclass, field as dfield

from .executor import ExecutionError, answer_string, execute
from .qlang import parse_program
from .relations import COMPARATIVES, UNARY_RELATIONS

QUESTION_TYPES = ["concept", "counting", "relation", "comparison"]


class AgreementMeter:
    """Evaluator wrapper that measures learned-vs-geometric agreement on
    plain relation decisions (comparatives are rankings, not booleans)."""

    def __init__(self, evaluator, geometric):
        self.evaluator = evaluator
        self.geometric = geometric
        self.agree = 0
        self.total = 0

    @property
    def name(self):
        return self.evaluator.name

    def score(self, instances, relation):
        s = self.evaluator.score(instances, relation)
        if relation not in COMPARATIVES and relation not in UNARY_RELATIONS:
            g = self.geometric.score(instances, relation)
            self.total += 1
            self.agree += int((s > 0.5) == (g > 0.5))
        return s

    def rate(self):
        return self.agree / self.total if self.total else None


@dataclass
class EvalReport:
    per_type: dict
    per_template: dict
    overall_correct: int
    overall_count: int
    agreement_rate: object = None
    fallback_relations: list = dfield(default_factory=list)
    errors: int = 0

    @property
    def overall(self):
        return self.overall_correct / self.overall_count if self.overall_count else None

    def accuracy(self, qtype):
        d = self.per_type.get(qtype, {"count": 0, "correct": 0})
        return d["correct"] / d["count"] if d["count"] else None

    def to_json(self):
        def acc(d):
            return d["correct"] / d["count"] if d["count"] else None

        return {
            "overall": {
                "count": self.overall_count,
                "correct": self.overall_correct,
                "accuracy": self.overall,
                "undefined": self.overall_count == 0,
            },
            "per_type": {
                k: {**v, "accuracy": acc(v), "undefined": v["count"] == 0}
                for k, v in self.per_type.items()
            },
            "per_template": {
                k: {**v, "accuracy": acc(v)} for k, v in sorted(self.per_template.items())
            },
            "relation_evaluator_agreement": self.agreement_rate,
            "fallback_relations": sorted(self.fallback_relations),
            "execution_errors": self.errors,
        }

    def format_table(self):
        """Aligned accuracy table over the four question types."""
        cols = QUESTION_TYPES + ["overall"]
        vals = [self.accuracy(t) for t in QUESTION_TYPES] + [self.overall]
        cnts = [self.per_type.get(t, {"count": 0})["count"] for t in QUESTION_TYPES]
        cnts.append(self.overall_count)
        head = " | ".join(f"{c:>10}" for c in cols)
        accs = " | ".join(f"{(f'{v*100:.1f}' if v is not None else 'n/a'):>10}" for v in vals)
        ns = " | ".join(f"{n:>10}" for n in cnts)
        sep = "-+-".join("-" * 10 for _ in cols)
        lines = [head, sep, accs, ns]
        if self.agreement_rate is not None:
            lines.append(f"relation evaluator agreement: {self.agreement_rate:.3f}")
        if self.fallback_relations:
            lines.append("geometric fallback for: " + ", ".join(sorted(self.fallback_relations)))
        return "\n".join(lines)

    def save(self, json_path, text_path=None):
        with open(json_path, "w") as f:
            json.dump(self.to_json(), f, indent=1)
        if text_path:
            with open(text_path, "w") as f:
                f.write(self.format_table() + "\n")


def evaluate(records, envs, meter_geometric=None) -> EvalReport:
    """Exact-match accuracy of executing each record's program in its scene
    environment. envs: scene_id -> execution environment."""
    per_type = {t: {"count": 0, "correct": 0} for t in QUESTION_TYPES}
    per_template = {}
    correct_total = 0
    errors = 0
    meters = {}
    for rec in records:
        env = envs[rec.scene_id]
        if meter_geometric is not None and rec.scene_id not in meters:
            meter = AgreementMeter(env.evaluator, meter_geometric[rec.scene_id])
            meters[rec.scene_id] = meter
            env.evaluator = meter
        try:
            predicted = answer_string(execute(parse_program(rec.program), env))
        except ExecutionError:
            predicted = "<error>"
            errors += 1
        ok = predicted == rec.answer
        correct_total += int(ok)
        per_type.setdefault(rec.qtype, {"count": 0, "correct": 0})
        per_type[rec.qtype]["count"] += 1
        per_type[rec.qtype]["correct"] += int(ok)
        per_template.setdefault(rec.template, {"count": 0, "correct": 0})
        per_template[rec.template]["count"] += 1
        per_template[rec.template]["correct"] += int(ok)
    agreement = None
    if meters:
        agree = sum(m.agree for m in meters.values())
        total = sum(m.total for m in meters.values())
        agreement = agree / total if total else None
    fallbacks = set()
    for env in {id(e): e for e in envs.values()}.values():
        ev = getattr(env, "evaluator", None)
        inner = getattr(ev, "evaluator", ev)
        fallbacks |= getattr(inner, "fallbacks", set())
    return EvalReport(
        per_type=per_type,
        per_template=per_template,
        overall_correct=correct_total,
        overall_count=len(records),
        agreement_rate=agreement,
        fallback_relations=sorted(fallbacks),
        errors=errors,
    )
