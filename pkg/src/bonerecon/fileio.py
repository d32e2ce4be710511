"""Binary + JSON-sidecar persistence for volumes, projections, meshes, scenes.

Numeric payloads are little-endian binaries with a schema-versioned JSON
sidecar; meshes ship as ASCII OBJ (9 significant digits) or binary
little-endian PLY (f64 vertices, so round-trips are bitwise). All writes
are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .drr import ProjectionImage
from .geometry import CameraGeometry
from .isosurface import TriangleMesh
from .phantom import PhantomScene, Volume3D

SCHEMA_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


# ---------------------------------------------------------------------------
# volumes


def save_volume(vol: Volume3D, path) -> None:
    path = Path(path)
    atomic_write_bytes(path, vol.values.astype("<f4").tobytes())
    meta = {
        "schema_version": SCHEMA_VERSION,
        "extents": list(vol.values.shape),
        "spacing": vol.spacing,
        "origin": vol.origin.tolist(),
        "dtype": "<f4",
    }
    atomic_write_text(_sidecar(path), json.dumps(meta, indent=1))


def load_volume(path) -> Volume3D:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    extents = tuple(meta["extents"])
    raw = path.read_bytes()
    expected = int(np.prod(extents)) * 4
    if len(raw) != expected:
        raise ValueError(
            f"volume binary size mismatch: {len(raw)} bytes, expected {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(extents)
    return Volume3D(values=values, spacing=meta["spacing"],
                    origin=np.array(meta["origin"]))


# ---------------------------------------------------------------------------
# projection images


def save_image(img: ProjectionImage, path) -> None:
    path = Path(path)
    atomic_write_bytes(path, img.values.astype("<f4").tobytes())
    meta = {
        "schema_version": SCHEMA_VERSION,
        "width": img.geometry.det_width,
        "height": img.geometry.det_height,
        "domain": img.domain,
        "geometry": img.geometry.to_dict(),
        "dtype": "<f4",
    }
    atomic_write_text(_sidecar(path), json.dumps(meta, indent=1))


def load_image(path) -> ProjectionImage:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    geom = CameraGeometry.from_dict(meta["geometry"])
    raw = path.read_bytes()
    expected = meta["width"] * meta["height"] * 4
    if len(raw) != expected:
        raise ValueError(
            f"image binary size mismatch: {len(raw)} bytes, expected {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    values = values.reshape(meta["height"], meta["width"])
    return ProjectionImage(values=values, geometry=geom, domain=meta["domain"])


def export_png(img: ProjectionImage, path) -> None:
    """16-bit grayscale PNG for visual inspection."""
    from PIL import Image

    lo, hi = img.values.min(), img.values.max()
    scale = (img.values - lo) / (hi - lo) if hi > lo else np.zeros_like(img.values)
    Image.fromarray((scale * 65535).astype(np.uint16), mode="I;16").save(path)


# ---------------------------------------------------------------------------
# meshes


def save_mesh_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"o bone_{mesh.class_id if mesh.class_id is not None else 0}"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_mesh_obj(path) -> TriangleMesh:
    verts, tris = [], []
    class_id = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("o bone_"):
            class_id = int(line.split("_", 1)[1]) or None
        elif line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            tris.append([int(x.split("/")[0]) - 1 for x in line.split()[1:4]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3),
                        class_id=class_id)


def save_mesh_ply(mesh: TriangleMesh, path) -> None:
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"comment class {mesh.class_id if mesh.class_id is not None else 0}",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]) + "\n"
    body = [header.encode("ascii"), mesh.vertices.astype("<f8").tobytes()]
    for t in mesh.triangles:
        body.append(struct.pack("<B3i", 3, int(t[0]), int(t[1]), int(t[2])))
    atomic_write_bytes(path, b"".join(body))


def load_mesh_ply(path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    class_id = None
    for line in header:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line.startswith("comment class"):
            class_id = int(line.split()[-1]) or None
    offset = end
    verts = np.frombuffer(raw, dtype="<f8", count=n_vert * 3,
                          offset=offset).reshape(-1, 3)
    offset += n_vert * 24
    tris = np.zeros((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        count = raw[offset]
        if count != 3:
            raise ValueError("only triangle faces are supported")
        tris[i] = struct.unpack_from("<3i", raw, offset + 1)
        offset += 13
    return TriangleMesh(verts.astype(np.float64), tris, class_id=class_id)


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    if path.suffix == ".obj":
        save_mesh_obj(mesh, path)
    elif path.suffix == ".ply":
        save_mesh_ply(mesh, path)
    else:
        raise ValueError(f"unknown mesh extension {path.suffix!r} (use .obj or .ply)")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix == ".obj":
        return load_mesh_obj(path)
    if path.suffix == ".ply":
        return load_mesh_ply(path)
    raise ValueError(f"unknown mesh extension {path.suffix!r} (use .obj or .ply)")


# ---------------------------------------------------------------------------
# scenes and manifests


def save_scene(scene: PhantomScene, views: dict[str, CameraGeometry], path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "scene": scene.to_dict(),
        "views": {name: g.to_dict() for name, g in views.items()},
    }
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def load_scene(path) -> tuple[PhantomScene, dict[str, CameraGeometry]]:
    doc = json.loads(Path(path).read_text())
    scene = PhantomScene.from_dict(doc["scene"])
    views = {name: CameraGeometry.from_dict(g) for name, g in doc["views"].items()}
    return scene, views


def write_manifest(out_dir, stage: str, inputs: list, outputs: list,
                   seeds: dict | None = None) -> Path:
    """Hash every produced file so identical runs yield identical manifests."""
    out_dir = Path(out_dir)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "stage": stage,
        "seeds": seeds or {},
        "inputs": {str(Path(p).relative_to(out_dir)): sha256_file(p)
                   for p in sorted(map(str, inputs))},
        "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p)
                    for p in sorted(map(str, outputs))},
    }
    path = out_dir / f"{stage}_manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True))
    return path
