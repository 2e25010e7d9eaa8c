from pathlib import Path

import numpy as np

from ..core.errors import StorageError
from ..services.surface import TriangleMesh
from ..types.arrays import Points


def write_ply(path: Path, points: Points, mesh: TriangleMesh | None = None) -> None:
    """ASCII PLY of a point set, or of a mesh when one is given."""
    vertices = mesh.vertices if mesh is not None else np.asarray(points).reshape(-1, 3)
    variance = mesh.vertex_variance if mesh is not None else None
    faces = mesh.triangles if mesh is not None else np.empty((0, 3), dtype=np.int64)

    header = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}"]
    header += [f"property float {axis}" for axis in "xyz"]
    if variance is not None:
        header.append("property float variance")
    if mesh is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")

    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(header) + "\n")
        columns = vertices if variance is None else np.column_stack([vertices, variance])
        np.savetxt(f, columns, fmt="%.9g")
        if len(faces):
            np.savetxt(f, np.column_stack([np.full(len(faces), 3), faces]), fmt="%d")


def write_mesh(path: Path, mesh: TriangleMesh) -> None:
    write_ply(path, mesh.vertices, mesh)


def read_ply(path: Path) -> TriangleMesh:
    """Read an ASCII PLY written by write_ply (faces optional)."""
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise StorageError(f"cannot read PLY: {e}", path=str(path))
    if not lines or lines[0].strip() != "ply":
        raise StorageError("missing ply magic", path=str(path), line=1)

    n_vertices = n_faces = 0
    vertex_props: list[str] = []
    element = None
    body = None
    for number, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise StorageError("only ascii PLY is supported", path=str(path), line=number)
        elif tokens[0] == "element":
            element = tokens[1]
            if element == "vertex":
                n_vertices = int(tokens[2])
            elif element == "face":
                n_faces = int(tokens[2])
        elif tokens[0] == "property" and element == "vertex":
            vertex_props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body = number
            break
    if body is None:
        raise StorageError("missing end_header", path=str(path))
    if vertex_props[:3] != ["x", "y", "z"]:
        raise StorageError("vertex element must start with x y z", path=str(path))

    vertex_rows = lines[body : body + n_vertices]
    face_rows = lines[body + n_vertices : body + n_vertices + n_faces]
    if len(vertex_rows) < n_vertices or len(face_rows) < n_faces:
        raise StorageError("file ends before all elements were read", path=str(path), line=len(lines))

    vertices = np.empty((n_vertices, len(vertex_props)))
    for k, row in enumerate(vertex_rows):
        try:
            vertices[k] = [float(v) for v in row.split()]
        except ValueError:
            raise StorageError("malformed vertex row", path=str(path), line=body + k + 1)
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for k, row in enumerate(face_rows):
        tokens = row.split()
        if len(tokens) != 4 or tokens[0] != "3":
            raise StorageError("only triangle faces are supported", path=str(path), line=body + n_vertices + k + 1)
        faces[k] = [int(t) for t in tokens[1:]]

    variance = vertices[:, vertex_props.index("variance")] if "variance" in vertex_props else None
    return TriangleMesh(vertices=vertices[:, :3], triangles=faces, vertex_variance=variance)
