"""Dataset ingestion, model archives and result serialization.

Archives are canonical JSON: keys sorted, reals printed with 17 significant
digits (lossless for doubles), a checksum over the payload, and a format
version checked on load.  Identical models produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .adaptive import AmfccCombo, AmfccModel, AmfewmaModel
from .basis import BasisSystem, block_gram, build_basis
from .errors import (
    DuplicateRecord,
    IntegrityError,
    InvalidConfiguration,
    InvalidData,
    ParseError,
    SchemaError,
    UnsupportedVersion,
)
from .frcc import FofModel, FrccModel
from .frtm import Curve, FdtwConfig, PerXModel, RtModel
from .mfpca import MfpcaModel, StandardizationModel
from .monitoring import MonitoringModel, MonitoringOutcome
from .robust import RobustPcaModel
from .smoothing import DiscreteProfile

__all__ = [
    "FORMAT_VERSION",
    "IngestReport",
    "ingest_csv",
    "export_csv",
    "save_model",
    "load_model",
    "model_kind",
    "canonical_json",
    "outcome_record",
    "write_outcomes",
]

FORMAT_VERSION = 1

CSV_HEADER = ["obs_id", "component", "t", "y"]


# ------------------------------------------------------------ canonical JSON


def _write_json(obj, out):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            raise InvalidData("archives cannot carry non-finite reals")
        out.append(format(value, ".17g"))
    elif isinstance(obj, dict):
        out.append("{")
        first = True
        for key in sorted(obj):
            if not isinstance(key, str):
                raise InvalidConfiguration("archive keys must be strings")
            if not first:
                out.append(",")
            first = False
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _write_json(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, item in enumerate(np.asarray(obj).tolist() if isinstance(obj, np.ndarray) else obj):
            if i:
                out.append(",")
            _write_json(item, out)
        out.append("]")
    else:
        raise InvalidConfiguration(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, 17-significant-digit reals."""
    out = []
    _write_json(obj, out)
    return "".join(out)


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _np(obj):
    return np.asarray(obj, dtype=float)


# --------------------------------------------------------------- CSV dataset


@dataclass
class IngestReport:
    """Profiles plus bookkeeping from a CSV ingest."""

    profiles: list
    components: list
    counts: dict  # component name -> total point count


def ingest_csv(path, domain, components=None) -> IngestReport:
    """Read a tidy CSV (obs_id, component, t, y) into profiles.

    Observations keep file order; components are sorted by name unless an
    explicit order is supplied.  Missing components become empty blocks.
    """
    a, b = float(domain[0]), float(domain[1])
    data: dict = {}
    seen_keys = set()
    comp_names = set()
    order: list = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise SchemaError("empty file: missing header") from exc
        if [h.strip() for h in header] != CSV_HEADER:
            missing = [h for h in CSV_HEADER if h not in header]
            raise SchemaError(
                f"bad header {header!r}; missing columns: {missing or 'order mismatch'}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise SchemaError(f"line {line_no}: expected 4 fields, got {len(row)}")
            obs_id, comp, t_raw, y_raw = row
            try:
                t = float(t_raw)
                y = float(y_raw)
            except ValueError as exc:
                raise ParseError(f"line {line_no}: non-numeric t/y {t_raw!r}, {y_raw!r}") from exc
            if not (a - 1e-12 <= t <= b + 1e-12):
                raise ParseError(f"line {line_no}: t={t} outside declared domain [{a}, {b}]")
            key = (obs_id, comp, t)
            if key in seen_keys:
                raise DuplicateRecord(f"line {line_no}: duplicate record {key}")
            seen_keys.add(key)
            comp_names.add(comp)
            if obs_id not in data:
                data[obs_id] = {}
                order.append(obs_id)
            data[obs_id].setdefault(comp, []).append((t, y))

    if components is None:
        components = sorted(comp_names)
    else:
        components = list(components)
        unknown = comp_names - set(components)
        if unknown:
            raise SchemaError(f"file has undeclared components: {sorted(unknown)}")

    profiles = []
    counts = {c: 0 for c in components}
    for obs_id in order:
        argvals, values = [], []
        for comp in components:
            pairs = sorted(data[obs_id].get(comp, []))
            argvals.append(np.array([t for t, _ in pairs]))
            values.append(np.array([y for _, y in pairs]))
            counts[comp] += len(pairs)
        profiles.append(DiscreteProfile(argvals, values, obs_id=obs_id))
    return IngestReport(profiles=profiles, components=components, counts=counts)


def export_csv(profiles, path, components=None):
    """Write profiles in the tidy format with lossless reals."""
    if components is None:
        components = [f"c{k}" for k in range(profiles[0].p)]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        for prof in profiles:
            obs_id = prof.obs_id or ""
            for k, comp in enumerate(components):
                for t, y in zip(prof.argvals[k], prof.values[k]):
                    writer.writerow(
                        [obs_id, comp, format(float(t), ".17g"), format(float(y), ".17g")]
                    )


# ------------------------------------------------------------ model encoding


def _enc_basis(basis: BasisSystem):
    return {"domain": [basis.domain[0], basis.domain[1]], "K": basis.K, "order": basis.order}


def _dec_basis(obj):
    return build_basis(tuple(obj["domain"]), K=int(obj["K"]), order=int(obj["order"]))


def _enc_std(std: StandardizationModel):
    return {
        "mean_coeffs": _arr(std.mean_coeffs),
        "var_coeffs": _arr(std.var_coeffs),
        "floor": float(std.floor),
        "basis": _enc_basis(std.basis),
        "grid_size": int(std.grid_size),
    }


def _dec_std(obj):
    return StandardizationModel(
        mean_coeffs=_np(obj["mean_coeffs"]),
        var_coeffs=_np(obj["var_coeffs"]),
        floor=float(obj["floor"]),
        basis=_dec_basis(obj["basis"]),
        grid_size=int(obj["grid_size"]),
    )


def _enc_mfpca(mf: MfpcaModel):
    out = {
        "basis": _enc_basis(mf.basis),
        "p": int(mf.p),
        "eig_coeffs": _arr(mf.eig_coeffs),
        "eigenvalues": _arr(mf.eigenvalues),
        "total_variance": float(mf.total_variance),
        "L": int(mf.L),
        "metric": _arr(mf.metric),
    }
    if isinstance(mf, RobustPcaModel):
        out["robust"] = {
            "case_weights": _arr(mf.case_weights),
            "outlyingness": _arr(mf.outlyingness),
            "location": _arr(mf.location),
        }
    return out


def _dec_mfpca(obj):
    basis = _dec_basis(obj["basis"])
    metric = _np(obj["metric"])
    eig = _np(obj["eig_coeffs"])
    if eig.size == 0:
        eig = eig.reshape(metric.shape[0], 0)
    common = dict(
        basis=basis,
        p=int(obj["p"]),
        eig_coeffs=eig,
        eigenvalues=_np(obj["eigenvalues"]),
        total_variance=float(obj["total_variance"]),
        L=int(obj["L"]),
        metric=metric,
        score_proj=metric @ eig,
    )
    if "robust" in obj:
        extra = obj["robust"]
        return RobustPcaModel(
            **common,
            case_weights=_np(extra["case_weights"]),
            outlyingness=_np(extra["outlyingness"]),
            location=_np(extra["location"]),
        )
    return MfpcaModel(**common)


def _enc_monitoring(model: MonitoringModel):
    return {
        "standardization": _enc_std(model.standardization),
        "mfpca": _enc_mfpca(model.mfpca),
        "cl_t2": float(model.cl_t2),
        "cl_spe": float(model.cl_spe),
        "contrib_limits_t2": _arr(model.contrib_limits_t2),
        "contrib_limits_spe": _arr(model.contrib_limits_spe),
        "alpha_star": float(model.alpha_star),
        "lambdas": None if model.lambdas is None else _arr(model.lambdas),
        "chart_kind": model.kind,
    }


def _dec_monitoring(obj):
    return MonitoringModel(
        standardization=_dec_std(obj["standardization"]),
        mfpca=_dec_mfpca(obj["mfpca"]),
        cl_t2=float(obj["cl_t2"]),
        cl_spe=float(obj["cl_spe"]),
        contrib_limits_t2=_np(obj["contrib_limits_t2"]),
        contrib_limits_spe=_np(obj["contrib_limits_spe"]),
        alpha_star=float(obj["alpha_star"]),
        lambdas=None if obj["lambdas"] is None else _np(obj["lambdas"]),
        kind=obj["chart_kind"],
    )


def _enc_fof(fof: FofModel):
    return {
        "x_mfpca": _enc_mfpca(fof.x_mfpca),
        "y_fpca": _enc_mfpca(fof.y_fpca),
        "b": _arr(fof.b),
        "resid_var_coeffs": _arr(fof.resid_var_coeffs),
        "sigma_eps": _arr(fof.sigma_eps),
        "n_train": int(fof.n_train),
        "L": int(fof.L),
        "M": int(fof.M),
        "var_floor": float(fof.var_floor),
    }


def _dec_fof(obj):
    return FofModel(
        x_mfpca=_dec_mfpca(obj["x_mfpca"]),
        y_fpca=_dec_mfpca(obj["y_fpca"]),
        b=_np(obj["b"]),
        resid_var_coeffs=_np(obj["resid_var_coeffs"]),
        sigma_eps=_np(obj["sigma_eps"]),
        n_train=int(obj["n_train"]),
        L=int(obj["L"]),
        M=int(obj["M"]),
        var_floor=float(obj["var_floor"]),
    )


def _enc_frcc(model: FrccModel):
    return {
        "x_std": _enc_std(model.x_std),
        "y_std": _enc_std(model.y_std),
        "fof": _enc_fof(model.fof),
        "monitor": _enc_monitoring(model.monitor),
        "choice": model.choice,
        "alpha_star": float(model.alpha_star),
        "lambdas_x": None if model.lambdas_x is None else _arr(model.lambdas_x),
        "lambdas_y": None if model.lambdas_y is None else _arr(model.lambdas_y),
        "covariates": model.covariates,
        "response": model.response,
    }


def _dec_frcc(obj):
    return FrccModel(
        x_std=_dec_std(obj["x_std"]),
        y_std=_dec_std(obj["y_std"]),
        fof=_dec_fof(obj["fof"]),
        monitor=_dec_monitoring(obj["monitor"]),
        choice=obj["choice"],
        alpha_star=float(obj["alpha_star"]),
        lambdas_x=None if obj.get("lambdas_x") is None else _np(obj["lambdas_x"]),
        lambdas_y=None if obj.get("lambdas_y") is None else _np(obj["lambdas_y"]),
        covariates=obj.get("covariates"),
        response=obj.get("response"),
    )


def _enc_perx(per: PerXModel):
    return {
        "x_frac": float(per.x_frac),
        "std_aligned": _enc_std(per.std_aligned),
        "std_warp": _enc_std(per.std_warp),
        "scalar_means": _arr(per.scalar_means),
        "scalar_sds": _arr(per.scalar_sds),
        "block_scale": _arr(per.block_scale),
        "mfpca": _enc_mfpca(per.mfpca),
        "cl_t2": float(per.cl_t2),
        "cl_spe": float(per.cl_spe),
        "contrib_limits_t2": _arr(per.contrib_limits_t2),
        "contrib_limits_spe": _arr(per.contrib_limits_spe),
    }


def _dec_perx(obj):
    return PerXModel(
        x_frac=float(obj["x_frac"]),
        std_aligned=_dec_std(obj["std_aligned"]),
        std_warp=_dec_std(obj["std_warp"]),
        scalar_means=_np(obj["scalar_means"]),
        scalar_sds=_np(obj["scalar_sds"]),
        block_scale=_np(obj["block_scale"]),
        mfpca=_dec_mfpca(obj["mfpca"]),
        cl_t2=float(obj["cl_t2"]),
        cl_spe=float(obj["cl_spe"]),
        contrib_limits_t2=_np(obj["contrib_limits_t2"]),
        contrib_limits_spe=_np(obj["contrib_limits_spe"]),
    )


def _enc_frtm(model: RtModel):
    return {
        "template_x": _arr(model.template.x),
        "template_y": _arr(model.template.y),
        "template_coeffs": _arr(model.template_coeffs),
        "lam": float(model.lam),
        "config": {
            "s_min": float(model.config.s_min),
            "s_max": float(model.config.s_max),
            "lam": float(model.config.lam),
            "alpha_grid": list(map(float, model.config.alpha_grid)),
            "grid_sizes": list(map(int, model.config.grid_sizes)),
        },
        "amp_basis": _enc_basis(model.amp_basis),
        "warp_basis": _enc_basis(model.warp_basis),
        "query_domain": [float(model.query_domain[0]), float(model.query_domain[1])],
        "monitoring_grid": _arr(model.monitoring_grid),
        "per_x": [_enc_perx(per) for per in model.per_x],
        "alpha_star": float(model.alpha_star),
    }


def _dec_frtm(obj):
    cfg = obj["config"]
    return RtModel(
        template=Curve(_np(obj["template_x"]), _np(obj["template_y"])),
        template_coeffs=_np(obj["template_coeffs"]),
        lam=float(obj["lam"]),
        config=FdtwConfig(
            s_min=float(cfg["s_min"]),
            s_max=float(cfg["s_max"]),
            lam=float(cfg["lam"]),
            alpha_grid=tuple(cfg["alpha_grid"]),
            grid_sizes=tuple(cfg["grid_sizes"]),
        ),
        amp_basis=_dec_basis(obj["amp_basis"]),
        warp_basis=_dec_basis(obj["warp_basis"]),
        query_domain=tuple(obj["query_domain"]),
        monitoring_grid=_np(obj["monitoring_grid"]),
        per_x=[_dec_perx(per) for per in obj["per_x"]],
        alpha_star=float(obj["alpha_star"]),
    )


def _enc_amfewma(model: AmfewmaModel):
    return {
        "lam": float(model.lam),
        "k": float(model.k),
        "basis": _enc_basis(model.basis),
        "mean_coeffs": _arr(model.mean_coeffs),
        "sd_coeffs": _arr(model.sd_coeffs),
        "std_ewma": _enc_std(model.std_ewma),
        "mfpca": _enc_mfpca(model.mfpca),
        "cl": float(model.cl),
        "target_arl": float(model.target_arl),
        "grid_size": int(model.grid_size),
        "lambdas": None if model.lambdas is None else _arr(model.lambdas),
    }


def _dec_amfewma(obj):
    return AmfewmaModel(
        lam=float(obj["lam"]),
        k=float(obj["k"]),
        basis=_dec_basis(obj["basis"]),
        mean_coeffs=_np(obj["mean_coeffs"]),
        sd_coeffs=_np(obj["sd_coeffs"]),
        std_ewma=_dec_std(obj["std_ewma"]),
        mfpca=_dec_mfpca(obj["mfpca"]),
        cl=float(obj["cl"]),
        target_arl=float(obj["target_arl"]),
        grid_size=int(obj["grid_size"]),
        lambdas=None if obj.get("lambdas") is None else _np(obj["lambdas"]),
    )


def _enc_amfcc(model: AmfccModel):
    return {
        "basis": _enc_basis(model.basis),
        "p": int(model.p),
        "combos": [
            {
                "lam": float(c.lam),
                "L": int(c.L),
                "std": _enc_std(c.std),
                "mfpca": _enc_mfpca(c.mfpca),
                "tuning_t2": _arr(c.tuning_t2),
                "contrib_t2_ref": _arr(c.contrib_t2_ref),
                "contrib_spe_ref": _arr(c.contrib_spe_ref),
            }
            for c in model.combos
        ],
        "combiner": model.combiner,
        "cl": float(model.cl),
        "alpha_star": float(model.alpha_star),
        "n_tune": int(model.n_tune),
    }


def _dec_amfcc(obj):
    combos = [
        AmfccCombo(
            lam=float(c["lam"]),
            L=int(c["L"]),
            std=_dec_std(c["std"]),
            mfpca=_dec_mfpca(c["mfpca"]),
            tuning_t2=_np(c["tuning_t2"]),
            contrib_t2_ref=_np(c["contrib_t2_ref"]),
            contrib_spe_ref=_np(c["contrib_spe_ref"]),
        )
        for c in obj["combos"]
    ]
    return AmfccModel(
        basis=_dec_basis(obj["basis"]),
        p=int(obj["p"]),
        combos=combos,
        combiner=obj["combiner"],
        cl=float(obj["cl"]),
        alpha_star=float(obj["alpha_star"]),
        n_tune=int(obj["n_tune"]),
    )


_CODECS = {
    "monitoring": (MonitoringModel, _enc_monitoring, _dec_monitoring),
    "frcc": (FrccModel, _enc_frcc, _dec_frcc),
    "frtm": (RtModel, _enc_frtm, _dec_frtm),
    "amfewma": (AmfewmaModel, _enc_amfewma, _dec_amfewma),
    "amfcc": (AmfccModel, _enc_amfcc, _dec_amfcc),
}


def model_kind(model) -> str:
    """Archive kind string for a fitted model object."""
    if isinstance(model, MonitoringModel):
        return "romfcc" if model.kind == "romfcc" else "monitoring"
    for kind, (cls, _, _) in _CODECS.items():
        if isinstance(model, cls):
            return kind
    raise InvalidConfiguration(f"no archive codec for {type(model).__name__}")


def save_model(model, path) -> bytes:
    """Write a model archive; returns the exact bytes written."""
    kind = model_kind(model)
    codec_kind = "monitoring" if kind == "romfcc" else kind
    payload = _CODECS[codec_kind][1](model)
    payload_text = canonical_json(payload)
    checksum = hashlib.sha256(payload_text.encode("utf-8")).hexdigest()
    document = (
        "{"
        + f'"checksum":"{checksum}","format_version":{FORMAT_VERSION},'
        + f'"kind":{json.dumps(kind)},"payload":{payload_text}'
        + "}"
    )
    blob = document.encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(blob)
    return blob


def load_model(path):
    """Read a model archive, verifying version and checksum."""
    with open(path, "rb") as handle:
        try:
            document = json.loads(handle.read().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"unreadable archive: {exc}") from exc
    for field_name in ("checksum", "format_version", "kind", "payload"):
        if field_name not in document:
            raise IntegrityError(f"archive lacks field {field_name!r}")
    if document["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersion(
            f"archive format {document['format_version']}; this build reads {FORMAT_VERSION}"
        )
    payload_text = canonical_json(document["payload"])
    checksum = hashlib.sha256(payload_text.encode("utf-8")).hexdigest()
    if checksum != document["checksum"]:
        raise IntegrityError("payload checksum mismatch; archive corrupted")
    kind = document["kind"]
    codec_kind = "monitoring" if kind == "romfcc" else kind
    if codec_kind not in _CODECS:
        raise UnsupportedVersion(f"unknown archive kind {kind!r}")
    return _CODECS[codec_kind][2](document["payload"])


# ----------------------------------------------------------------- outcomes


def outcome_record(outcome: MonitoringOutcome, model=None) -> dict:
    """JSON-ready record for one chart outcome."""
    record = {
        "obs_id": outcome.obs_id,
        "t2": float(outcome.t2),
        "spe": float(outcome.spe),
        "signal_t2": bool(outcome.signal_t2),
        "signal_spe": bool(outcome.signal_spe),
        "signal": bool(outcome.signal),
        "contrib_t2": _arr(outcome.contrib_t2),
        "contrib_spe": _arr(outcome.contrib_spe),
        "flagged_components": [int(i) for i in outcome.flagged_components],
    }
    if outcome.context:
        record["context"] = {
            key: (list(value) if isinstance(value, tuple) else value)
            for key, value in outcome.context.items()
        }
    if model is not None:
        record["cl_t2"] = float(model.cl_t2)
        record["cl_spe"] = float(model.cl_spe)
    return record


def write_outcomes(records, path):
    """One canonical-JSON record per line."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(canonical_json(record))
            handle.write("\n")
