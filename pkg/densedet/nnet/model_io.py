"""Network and regressor persistence.

A model is two files: a YAML manifest (one record per layer, explicit keys)
and a raw blob of little-endian float32 values. Every parameterised layer
stores its weights (output-channel major, then input channel, then row-major
spatial) immediately followed by its bias. Manifest offsets are in bytes,
ascending, non-overlapping, and cover the blob exactly.

    format: densedet-network
    format_version: 1
    input_channels: 1
    preprocessing: {mean: [127.5], scale: 0.0078125}
    blob_bytes: 20232
    layers:
    - kind: convolution
      kernel: 5
      stride: 2
      padding: 0
      output_channels: 4
      weights: {offset: 0, count: 100}
      bias: {offset: 400, count: 4}
    - kind: relu
    ...

Regressors use `format: densedet-regressor` with a `regressor` section
listing one weight record per delta.
"""
import logging
import pathlib
from typing import Dict, List, Tuple, Union

import numpy as np
import yaml
from voluptuous import All, Any, Invalid, Length, Optional as Opt, Range, Required, Schema

from densedet.common.errors import ConfigurationError, Error
from densedet.detector.regressor import RegressorModel
from densedet.nnet.layers import LayerKind, LayerParams, LayerSpec, LrnParams
from densedet.nnet.network import NetworkSpec, validate

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

NETWORK_MAGIC = "densedet-network"
REGRESSOR_MAGIC = "densedet-regressor"
FORMAT_VERSION = 1
_FLOAT = np.dtype("<f4")
_DELTA_NAMES = ("tx", "ty", "tw", "th")


class ModelFormatError(Error):
    """Base class for unreadable model files."""


class BadMagicError(ModelFormatError):
    """The manifest is not a densedet manifest of the expected kind."""


class UnsupportedVersionError(ModelFormatError):
    """The manifest format version is not supported."""


class TruncatedBlobError(ModelFormatError):
    """The weight blob is shorter than the manifest demands."""


class InconsistentManifestError(ModelFormatError):
    """The manifest contradicts itself or the blob."""


_SPAN = Schema({Required("offset"): All(int, Range(min=0)), Required("count"): All(int, Range(min=0))})

_LAYER = Schema(
    {
        Required("kind"): Any(*[kind.value for kind in LayerKind]),
        Opt("kernel", default=1): All(int, Range(min=1)),
        Opt("stride", default=1): All(int, Range(min=1)),
        Opt("padding", default=0): All(int, Range(min=0)),
        Opt("output_channels"): All(int, Range(min=1)),
        Opt("input_shape"): All([All(int, Range(min=1))], Length(min=3, max=3)),
        Opt("from_fc", default=False): bool,
        Opt("lrn"): {
            Required("local_size"): All(int, Range(min=1)),
            Required("alpha"): Any(float, int),
            Required("beta"): Any(float, int),
            Required("k"): Any(float, int),
        },
        Opt("weights"): _SPAN,
        Opt("bias"): _SPAN,
    }
)

_NETWORK = Schema(
    {
        Required("format"): str,
        Required("format_version"): int,
        Required("input_channels"): All(int, Range(min=1)),
        Required("preprocessing"): {
            Required("mean"): [Any(float, int)],
            Required("scale"): Any(float, int),
        },
        Required("blob_bytes"): All(int, Range(min=0)),
        Required("layers"): [_LAYER],
    }
)

_REGRESSOR = Schema(
    {
        Required("format"): str,
        Required("format_version"): int,
        Required("blob_bytes"): All(int, Range(min=0)),
        Required("regressor"): {
            Required("feature_dim"): All(int, Range(min=1)),
            Required("ridge_lambda"): Any(float, int),
            Required("deltas"): All(
                [{Required("name"): str, Required("weights"): _SPAN, Required("bias"): _SPAN}], Length(min=4, max=4)
            ),
        },
    }
)


def _read_manifest(path: PathLike, magic: str, schema: Schema) -> Dict:
    try:
        doc = yaml.safe_load(pathlib.Path(path).read_text())
    except yaml.YAMLError as e:
        raise BadMagicError(f"{path}: not a YAML manifest: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != magic:
        raise BadMagicError(f"{path}: expected format {magic!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format_version {doc.get('format_version')!r} is not supported")
    try:
        return schema(doc)
    except Invalid as e:
        raise InconsistentManifestError(f"{path}: {e}") from e


def _check_spans(spans: List[Tuple[str, Dict]], blob_bytes: int, actual_bytes: int) -> None:
    position = 0
    for name, span in spans:
        if span["offset"] != position:
            raise InconsistentManifestError(
                f"{name}: offset {span['offset']} leaves a gap or overlap (expected {position})"
            )
        position += span["count"] * _FLOAT.itemsize
        if position > actual_bytes:
            raise TruncatedBlobError(f"{name}: needs bytes up to {position}, blob has {actual_bytes}")
    if position != blob_bytes:
        raise InconsistentManifestError(f"spans cover {position} bytes but blob_bytes is {blob_bytes}")
    if actual_bytes != blob_bytes:
        raise InconsistentManifestError(f"blob has {actual_bytes} bytes, manifest declares {blob_bytes}")


def _view(blob: bytes, span: Dict, shape) -> np.ndarray:
    values = np.frombuffer(blob, dtype=_FLOAT, count=span["count"], offset=span["offset"])
    # no-op on little-endian hosts
    return values.astype(np.float32, copy=False).reshape(shape)


def _layer_from_record(record: Dict, index: int) -> LayerSpec:
    lrn = record.get("lrn")
    try:
        return LayerSpec(
            kind=LayerKind(record["kind"]),
            kernel=record["kernel"],
            stride=record["stride"],
            padding=record["padding"],
            output_channels=record.get("output_channels"),
            input_shape=tuple(record["input_shape"]) if "input_shape" in record else None,
            lrn=LrnParams(lrn["local_size"], float(lrn["alpha"]), float(lrn["beta"]), float(lrn["k"])) if lrn else None,
            from_fc=record["from_fc"],
        )
    except ConfigurationError as e:
        raise InconsistentManifestError(f"layer {index}: {e}") from e


def load_model(manifest: PathLike, weights: PathLike) -> NetworkSpec:
    """Loads and validates a network.

    Arguments:
        manifest: Path of the YAML manifest.
        weights: Path of the float32 blob.

    Raises:
        BadMagicError: If the manifest is not a network manifest.
        UnsupportedVersionError: On an unknown format version.
        TruncatedBlobError: If the blob ends before a layer's parameters.
        InconsistentManifestError: If offsets or shapes do not agree.

    Returns:
        The validated network; its parameter arrays are read-only views.
    """
    doc = _read_manifest(manifest, NETWORK_MAGIC, _NETWORK)
    blob = pathlib.Path(weights).read_bytes()
    records = doc["layers"]
    spans = []
    for index, record in enumerate(records):
        for part in ("weights", "bias"):
            if part in record:
                spans.append((f"layer {index} {part}", record[part]))
    _check_spans(spans, doc["blob_bytes"], len(blob))

    layers, params = [], []
    for index, record in enumerate(records):
        layer = _layer_from_record(record, index)
        layers.append(layer)
        if not layer.has_params:
            if "weights" in record or "bias" in record:
                raise InconsistentManifestError(f"layer {index}: {layer.kind.value} layer carries parameters")
            params.append(None)
            continue
        if "weights" not in record or "bias" not in record or layer.output_channels is None:
            raise InconsistentManifestError(f"layer {index}: parameterised layer lacks weights, bias or output_channels")
        out = layer.output_channels
        count = record["weights"]["count"]
        if count % out:
            raise InconsistentManifestError(f"layer {index}: {count} weights do not split into {out} outputs")
        if layer.kind == LayerKind.CONVOLUTION:
            shape = (out, count // (out * layer.kernel * layer.kernel), layer.kernel, layer.kernel)
            if int(np.prod(shape)) != count:
                raise InconsistentManifestError(f"layer {index}: {count} weights do not form {layer.kernel}x{layer.kernel} filters")
        else:
            shape = (out, count // out)
        params.append(LayerParams(_view(blob, record["weights"], shape), _view(blob, record["bias"], (-1,))))

    prep = doc["preprocessing"]
    try:
        net = NetworkSpec(tuple(layers), tuple(params), doc["input_channels"], tuple(prep["mean"]), float(prep["scale"]))
        validate(net)
    except ConfigurationError as e:
        raise InconsistentManifestError(f"{manifest}: {e}") from e
    logger.debug("loaded model %s: %d layers, %d parameters", manifest, len(layers), net.parameter_count)
    return net


def _span(offset: int, values: np.ndarray) -> Dict:
    return {"offset": offset, "count": int(values.size)}


def _write(manifest: PathLike, weights: PathLike, doc: Dict, chunks: List[bytes]) -> None:
    pathlib.Path(weights).write_bytes(b"".join(chunks))
    pathlib.Path(manifest).write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=None))


def save_model(net: NetworkSpec, manifest: PathLike, weights: PathLike) -> None:
    """Writes a network as manifest plus blob; identical nets give identical bytes.

    Raises:
        ConfigurationError: If the network does not validate.
        OSError: If a file cannot be written.
    """
    validate(net)
    chunks, records, offset = [], [], 0
    for layer, params in zip(net.layers, net.params):
        record = {"kind": layer.kind.value}
        if layer.is_windowed:
            record.update(kernel=layer.kernel, stride=layer.stride, padding=layer.padding)
        if layer.output_channels is not None:
            record["output_channels"] = layer.output_channels
        if layer.input_shape is not None:
            record["input_shape"] = list(layer.input_shape)
        if layer.from_fc:
            record["from_fc"] = True
        if layer.lrn is not None:
            lrn = layer.lrn
            record["lrn"] = {"local_size": lrn.local_size, "alpha": lrn.alpha, "beta": lrn.beta, "k": lrn.k}
        if params is not None:
            for part, values in (("weights", params.weights), ("bias", params.bias)):
                data = np.ascontiguousarray(values, dtype=_FLOAT)
                record[part] = _span(offset, data)
                chunks.append(data.tobytes())
                offset += data.nbytes
        records.append(record)
    doc = {
        "format": NETWORK_MAGIC,
        "format_version": FORMAT_VERSION,
        "input_channels": net.input_channels,
        "preprocessing": {"mean": list(net.mean), "scale": float(net.scale)},
        "blob_bytes": offset,
        "layers": records,
    }
    _write(manifest, weights, doc, chunks)
    logger.debug("saved model %s: %d bytes of parameters", manifest, offset)


def save_regressor(model, manifest: PathLike, weights: PathLike) -> None:
    """Writes a RegressorModel in the blob format with a regressor section."""
    chunks, deltas, offset = [], [], 0
    for name, w, b in zip(_DELTA_NAMES, model.weights, model.biases):
        entry = {"name": name}
        for part, values in (("weights", np.asarray(w)), ("bias", np.asarray([b]))):
            data = np.ascontiguousarray(values, dtype=_FLOAT)
            entry[part] = _span(offset, data)
            chunks.append(data.tobytes())
            offset += data.nbytes
        deltas.append(entry)
    doc = {
        "format": REGRESSOR_MAGIC,
        "format_version": FORMAT_VERSION,
        "blob_bytes": offset,
        "regressor": {"feature_dim": model.feature_dim, "ridge_lambda": float(model.ridge_lambda), "deltas": deltas},
    }
    _write(manifest, weights, doc, chunks)


def load_regressor(manifest: PathLike, weights: PathLike):
    """Reads a regressor written by save_regressor.

    Raises:
        ModelFormatError: As load_model.

    Returns:
        A RegressorModel.
    """
    doc = _read_manifest(manifest, REGRESSOR_MAGIC, _REGRESSOR)
    blob = pathlib.Path(weights).read_bytes()
    section = doc["regressor"]
    by_name = {entry["name"]: entry for entry in section["deltas"]}
    if sorted(by_name) != sorted(_DELTA_NAMES):
        raise InconsistentManifestError(f"{manifest}: deltas must be {_DELTA_NAMES}")
    spans = []
    for entry in section["deltas"]:
        spans.extend([(f"{entry['name']} weights", entry["weights"]), (f"{entry['name']} bias", entry["bias"])])
    _check_spans(spans, doc["blob_bytes"], len(blob))
    dim = section["feature_dim"]
    weights_rows, biases = [], []
    for name in _DELTA_NAMES:
        entry = by_name[name]
        if entry["weights"]["count"] != dim or entry["bias"]["count"] != 1:
            raise InconsistentManifestError(f"{manifest}: {entry['name']} does not have {dim} weights and one bias")
        weights_rows.append(_view(blob, entry["weights"], (dim,)).astype(np.float64))
        biases.append(float(_view(blob, entry["bias"], (1,))[0]))
    return RegressorModel(np.stack(weights_rows), np.asarray(biases), float(section["ridge_lambda"]))


def model_paths(prefix: PathLike) -> Tuple[pathlib.Path, pathlib.Path]:
    """The (manifest, blob) pair for a model prefix: PREFIX.yaml and PREFIX.weights."""
    prefix = pathlib.Path(prefix)
    return prefix.with_name(prefix.name + ".yaml"), prefix.with_name(prefix.name + ".weights")
