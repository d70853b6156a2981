from __future__ import annotations

import numpy as np
import pytest

from splatclean.model import Gaussian, GaussianCloud
from splatclean.ply import PlyFormatError, PlyParseError, load_ply, save_ply


def _cloud(n=3, degree=2, seed=0):
    rng = np.random.default_rng(seed)
    gs = []
    for _ in range(n):
        q = rng.standard_normal(4)
        gs.append(Gaussian(
            center=rng.standard_normal(3).astype(np.float32),
            log_scales=rng.standard_normal(3).astype(np.float32),
            rotation=(q / np.linalg.norm(q)).astype(np.float32),
            opacity_logit=float(np.float32(rng.standard_normal())),
            sh_coeffs=rng.standard_normal(((degree + 1) ** 2, 3)).astype(np.float32),
            importance_logit=float(np.float32(rng.standard_normal())),
        ))
    return GaussianCloud.from_gaussians(gs, degree)


def test_roundtrip_single_gaussian_bit_exact(tmp_path):
    cloud = _cloud(n=1)
    path = tmp_path / "one.ply"
    save_ply(cloud, path)
    back = load_ply(path)
    assert len(back) == 1
    for field in ("centers", "log_scales", "rotations", "opacity_logits",
                  "sh_dc", "sh_rest", "importance_logits", "normals"):
        assert np.array_equal(getattr(back, field), getattr(cloud, field)), field


def test_roundtrip_bytes_identical(tmp_path):
    cloud = _cloud(n=7, degree=3)
    p1 = tmp_path / "a.ply"
    p2 = tmp_path / "b.ply"
    save_ply(cloud, p1)
    save_ply(load_ply(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_vertex_count_written(tmp_path):
    path = tmp_path / "three.ply"
    save_ply(_cloud(n=3), path)
    header = path.read_bytes().split(b"end_header")[0].decode()
    assert "element vertex 3" in header


def test_frest_count_degree1(tmp_path):
    path = tmp_path / "deg1.ply"
    save_ply(_cloud(n=2, degree=1), path)
    header = path.read_bytes().split(b"end_header")[0].decode()
    assert sum(1 for line in header.splitlines() if "f_rest_" in line) == 9


def test_degree_inferred_from_frest(tmp_path):
    path = tmp_path / "deg3.ply"
    save_ply(_cloud(n=2, degree=3), path)
    back = load_ply(path)
    assert back.sh_degree == 3
    assert back.sh_rest.shape[1] == 15  # (3+1)^2 - 1 triplets from 45 scalars


def test_empty_cloud_roundtrip(tmp_path):
    path = tmp_path / "empty.ply"
    save_ply(GaussianCloud.empty(2), path)
    back = load_ply(path)
    assert len(back) == 0
    assert back.sh_degree == 2


def test_missing_importance_gets_neutral_prior(tmp_path):
    cloud = _cloud(n=2, degree=0)
    path = tmp_path / "noimp.ply"
    save_ply(cloud, path)
    raw = path.read_bytes()
    # strip the importance property: drop header line and last float per vertex
    header, body = raw.split(b"end_header\n")
    header = header.replace(b"property float importance\n", b"")
    data = np.frombuffer(body, dtype="<f4").reshape(2, -1)[:, :-1]
    stripped = tmp_path / "stripped.ply"
    stripped.write_bytes(header + b"end_header\n" + data.tobytes())
    back = load_ply(stripped)
    assert np.allclose(back.importances, 0.5)
    override = load_ply(stripped, default_importance=0.9)
    assert np.allclose(override.importances, 0.9)


def test_malformed_header_names_line(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex x y\nend_header\n")
    with pytest.raises(PlyParseError, match="element"):
        load_ply(path)


def test_wrong_frest_count_rejected(tmp_path):
    cloud = _cloud(n=1, degree=1)
    path = tmp_path / "deg1.ply"
    save_ply(cloud, path)
    raw = path.read_bytes()
    header, body = raw.split(b"end_header\n")
    header = header.replace(b"property float f_rest_8\n", b"")
    data = np.frombuffer(body, dtype="<f4").reshape(1, -1)
    data = np.delete(data, 17, axis=1)  # drop one f_rest column
    bad = tmp_path / "bad_count.ply"
    bad.write_bytes(header + b"end_header\n" + data.tobytes())
    with pytest.raises(PlyFormatError):
        load_ply(bad)


def test_truncated_payload_rejected(tmp_path):
    cloud = _cloud(n=3)
    path = tmp_path / "ok.ply"
    save_ply(cloud, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ply").write_bytes(raw[:-8])
    with pytest.raises(PlyFormatError, match="truncated"):
        load_ply(tmp_path / "trunc.ply")


def test_non_binary_format_rejected(tmp_path):
    path = tmp_path / "ascii.ply"
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(PlyParseError, match="format"):
        load_ply(path)
