"""JSON schemas for every report the pipeline writes."""

from __future__ import annotations

from typing import Any

import jsonschema

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_int = {"type": "integer", "minimum": 0}
_vec = {"type": "array", "items": _num}
_opt_num_map = {"type": "object", "additionalProperties": _opt_num}

_cell = {
    "type": "object",
    "required": ["S", "N"],
    "properties": {
        "S": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2},
        "N": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2},
    },
}
_split_table = {"type": "object", "required": ["CN", "AD"], "properties": {"CN": _cell, "AD": _cell}}
COMPOSITION = {
    "type": "object",
    "required": ["train", "val", "test"],
    "properties": {s: _split_table for s in ("train", "val", "test")},
}

_members = {
    "type": "array",
    "items": {
        "type": "array",
        "prefixItems": [{"type": "string"}, {"type": "string"}, {"enum": [0, 1]}, {"enum": [0, 1]}],
        "minItems": 4,
        "maxItems": 4,
    },
}

DATASET_PAIR = {
    "type": "object",
    "required": ["name", "attribute", "train", "val", "test", "declared", "composition"],
    "properties": {
        "name": {"type": "string"},
        "attribute": {"enum": ["sex", "race"]},
        "train": _members,
        "val": _members,
        "test": _members,
        "declared": COMPOSITION,
        "composition": COMPOSITION,
    },
}

AUDIT = {
    "type": "object",
    "required": ["passed", "checks", "cohort_totals", "compositions", "unused"],
    "properties": {
        "passed": {"type": "boolean"},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "detail", "delta"],
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "detail": {"type": "string"},
                    "delta": _int,
                },
            },
        },
        "cohort_totals": _split_table,
        "compositions": {"type": "object", "additionalProperties": COMPOSITION},
        "unused": {"type": "object", "additionalProperties": _split_table},
    },
}

EVAL_REPORT = {
    "type": "object",
    "required": [
        "n", "class_names", "group_names", "confusion", "f1", "macro_f1", "accuracy",
        "group_accuracy", "cell_accuracy", "group_counts", "cell_counts",
    ],
    "properties": {
        "n": _int,
        "class_names": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        "group_names": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        "confusion": {"type": "array", "items": {"type": "array", "items": _int}},
        "f1": _opt_num_map,
        "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "group_accuracy": _opt_num_map,
        "cell_accuracy": _opt_num_map,
        "group_counts": {"type": "object", "additionalProperties": _int},
        "cell_counts": {"type": "object", "additionalProperties": _int},
    },
}

EVALUATION = {
    "type": "object",
    "required": ["reports", "delta", "minority_cells", "minority_drop", "training"],
    "properties": {
        "reports": {"type": "object", "additionalProperties": EVAL_REPORT},
        "delta": {
            "type": "object",
            "required": ["f1", "macro_f1", "group_accuracy", "cell_accuracy", "baseline", "biased"],
            "properties": {
                "f1": _opt_num_map,
                "macro_f1": _num,
                "group_accuracy": _opt_num_map,
                "cell_accuracy": _opt_num_map,
                "baseline": EVAL_REPORT,
                "biased": EVAL_REPORT,
            },
        },
        "minority_cells": {"type": "array", "items": {"type": "string"}},
        "minority_drop": _opt_num,
        "training": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["target", "best_epoch", "history"],
                "properties": {
                    "target": {"enum": ["diagnosis", "sex", "race"]},
                    "best_epoch": _int,
                    "history": {"type": "array", "items": {"type": "object"}},
                },
            },
        },
    },
}

ATTRIBUTIONS = {
    "type": "object",
    "required": ["transform", "models"],
    "properties": {
        "transform": {"type": "string"},
        "models": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["path", "sample_id", "target_class", "zero_gradient", "feature_layer"],
                    "properties": {
                        "path": {"type": "string"},
                        "sample_id": {"type": "string"},
                        "target_class": {"enum": [0, 1]},
                        "zero_gradient": {"type": "boolean"},
                        "feature_layer": {"type": "string"},
                    },
                },
            },
        },
    },
}

RANK_REPORT = {
    "type": "object",
    "required": [
        "region_ids", "region_names", "r_BA", "r_BI", "r_PA", "B", "P", "rho", "p_param",
        "p_perm", "degenerate", "n_permutations", "top_regions", "n_samples",
    ],
    "properties": {
        "region_ids": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "region_names": {"type": "array", "items": {"type": "string"}},
        "r_BA": _vec,
        "r_BI": _vec,
        "r_PA": _vec,
        "B": _vec,
        "P": _vec,
        "rho": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "p_param": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "p_perm": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "degenerate": {"type": "boolean"},
        "n_permutations": {"type": "integer", "minimum": 99},
        "top_regions": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "n_samples": _int,
    },
}

STABILITY = {
    "type": "object",
    "required": ["sampling", "patch_size", "top_fraction", "trials", "n_samples", "curves"],
    "properties": {
        "sampling": {"enum": ["ball", "size"]},
        "patch_size": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "top_fraction": _num,
        "trials": {"type": "integer", "minimum": 1},
        "n_samples": _int,
        "curves": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["radius", "stability"],
                    "properties": {
                        "radius": _int,
                        "stability": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
    },
}

SUMMARY = {
    "type": "object",
    "required": ["macro_f1", "minority_drop", "rho", "p_perm", "top_regions", "figures"],
    "properties": {
        "macro_f1": {"type": "object", "additionalProperties": _num},
        "minority_drop": _opt_num,
        "rho": _opt_num,
        "p_perm": _num,
        "top_regions": {"type": "array", "items": {"type": "integer"}},
        "planted_attr_regions": {"type": ["array", "null"], "items": {"type": "integer"}},
        "figures": {"type": "array", "items": {"type": "string"}},
    },
}

SCHEMAS: dict[str, dict] = {
    "dataset_pair": DATASET_PAIR,
    "audit": AUDIT,
    "evaluation": EVALUATION,
    "attributions": ATTRIBUTIONS,
    "rank_report": RANK_REPORT,
    "stability": STABILITY,
    "summary": SUMMARY,
}


def validate(payload: Any, kind: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``payload`` breaks schema ``kind``."""
    jsonschema.validate(payload, SCHEMAS[kind], cls=jsonschema.Draft202012Validator)
