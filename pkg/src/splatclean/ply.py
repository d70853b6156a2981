"""Binary PLY serialization for Gaussian clouds, layout-compatible with
standard 3DGS exports.

Vertex properties, in order: x y z, nx ny nz, f_dc_0..2, f_rest_0..R-1,
opacity, scale_0..2, rot_0..3, and our extra `importance` (always written,
optional on read). f_rest is channel-major like the reference exporter:
f_rest_j holds coefficient (j mod B) of channel (j div B) with B = (L+1)^2 - 1.
All payload values are float32 little-endian.
"""

from __future__ import annotations

import numpy as np

from .model import GaussianCloud, logit, sh_coeff_count, sh_degree_from_rest


class PlyParseError(ValueError):
    """Malformed PLY header; message names the offending line."""


class PlyFormatError(ValueError):
    """Structurally valid PLY that does not match the splat layout."""


_BASE_PROPS = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
_TAIL_PROPS = ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _expected_properties(sh_degree: int, with_importance: bool) -> list[str]:
    rest = 3 * (sh_coeff_count(sh_degree) - 1)
    props = list(_BASE_PROPS) + [f"f_rest_{i}" for i in range(rest)] + list(_TAIL_PROPS)
    if with_importance:
        props.append("importance")
    return props


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud as binary little-endian PLY; `importance` always included."""
    n = len(cloud)
    props = _expected_properties(cloud.sh_degree, with_importance=True)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")

    rest_b = cloud.sh_rest.shape[1]
    payload = np.empty((n, len(props)), dtype="<f4")
    payload[:, 0:3] = cloud.centers
    payload[:, 3:6] = cloud.normals
    payload[:, 6:9] = cloud.sh_dc
    if rest_b:
        # (N, B, 3) -> channel-major flat (N, 3*B)
        payload[:, 9:9 + 3 * rest_b] = np.transpose(cloud.sh_rest, (0, 2, 1)).reshape(n, 3 * rest_b)
    off = 9 + 3 * rest_b
    payload[:, off] = cloud.opacity_logits
    payload[:, off + 1:off + 4] = cloud.log_scales
    payload[:, off + 4:off + 8] = cloud.rotations
    payload[:, off + 8] = cloud.importance_logits

    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(payload.tobytes())
    except OSError as e:
        raise OSError(f"failed to write PLY to {path}: {e}") from e


def _parse_header(raw: bytes, path) -> tuple[int, list[tuple[str, str]], int]:
    """Returns (vertex_count, [(type, name)...], payload_offset)."""
    end_marker = b"end_header\n"
    end = raw.find(end_marker)
    if end < 0:
        raise PlyParseError(f"{path}: header has no end_header line")
    header_text = raw[:end].decode("ascii", errors="replace")
    lines = header_text.split("\n")
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError(f"{path}: first line must be 'ply', got {lines[0]!r}")

    vertex_count = None
    props: list[tuple[str, str]] = []
    in_vertex_element = False
    for line in lines[1:]:
        line = line.strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise PlyParseError(f"{path}: unsupported format line {line!r}")
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError(f"{path}: malformed element line {line!r}")
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                try:
                    vertex_count = int(parts[2])
                except ValueError:
                    raise PlyParseError(f"{path}: bad vertex count in line {line!r}") from None
        elif parts[0] == "property":
            if not in_vertex_element:
                continue
            if len(parts) != 3:
                raise PlyParseError(f"{path}: malformed property line {line!r}")
            props.append((parts[1], parts[2]))
        else:
            raise PlyParseError(f"{path}: unrecognized header line {line!r}")
    if vertex_count is None:
        raise PlyParseError(f"{path}: header declares no vertex element")
    return vertex_count, props, end + len(end_marker)


def load_ply(path, default_importance: float = 0.5) -> GaussianCloud:
    """Load a 3DGS-layout PLY.

    SH degree is inferred from the f_rest property count. Files without an
    `importance` property get logit(default_importance) for every Gaussian
    (a neutral pruning prior of 0.5 unless overridden).
    """
    with open(path, "rb") as f:
        raw = f.read()
    vertex_count, props, offset = _parse_header(raw, path)

    names = [name for _, name in props]
    for ptype, name in props:
        if ptype != "float":
            raise PlyFormatError(f"{path}: property {name!r} has type {ptype!r}, expected float")

    rest_count = sum(1 for n in names if n.startswith("f_rest_"))
    try:
        sh_degree = sh_degree_from_rest(rest_count)
    except ValueError as e:
        raise PlyFormatError(f"{path}: {e}") from None
    has_importance = "importance" in names
    expected = _expected_properties(sh_degree, with_importance=has_importance)
    if names != expected:
        raise PlyFormatError(
            f"{path}: vertex properties do not match the splat layout for SH degree "
            f"{sh_degree} (got {len(names)} properties, expected {len(expected)})"
        )

    n_props = len(names)
    need = vertex_count * n_props * 4
    body = raw[offset:offset + need]
    if len(body) < need:
        raise PlyFormatError(
            f"{path}: payload truncated ({len(body)} bytes, need {need} for {vertex_count} vertices)"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(vertex_count, n_props).astype(np.float64)

    rest_b = sh_coeff_count(sh_degree) - 1
    off = 9 + 3 * rest_b
    if rest_b:
        sh_rest = np.transpose(data[:, 9:9 + 3 * rest_b].reshape(vertex_count, 3, rest_b), (0, 2, 1))
    else:
        sh_rest = np.zeros((vertex_count, 0, 3))
    if has_importance:
        importance = data[:, off + 8]
    else:
        importance = np.full(vertex_count, logit(default_importance) if 0 < default_importance < 1 else 0.0)

    return GaussianCloud(
        centers=data[:, 0:3],
        log_scales=data[:, off + 1:off + 4],
        rotations=data[:, off + 4:off + 8],
        opacity_logits=data[:, off],
        sh_dc=data[:, 6:9],
        sh_rest=sh_rest,
        importance_logits=importance,
        normals=data[:, 3:6],
    )
