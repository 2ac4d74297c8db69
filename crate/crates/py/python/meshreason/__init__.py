"""Zero-shot 3D part segmentation by fusing multi-view 2D masks onto mesh faces."""

import json

from . import _meshreason
from ._meshreason import (
    BACKGROUND,
    EvalReport,
    HeatGeodesics,
    Mesh,
    Segmentation,
    View,
    default_config,
    dijkstra_geodesic,
    face_iou,
    fit_gaussian,
    gaussian_density,
    heat_geodesic,
    miou_report,
    render_views,
)

__version__ = _meshreason.__version__


def _config_json(config):
    if config is None or isinstance(config, str):
        return config
    return json.dumps(config)


class Session(_meshreason.Session):
    """Renders and queries the backend once; call ``fuse`` repeatedly.

    ``config`` may be a dict (nested like result.json's "config"), a JSON
    string or None for defaults.
    """

    def __new__(cls, mesh_path, query, backend, config=None):
        return super().__new__(cls, str(mesh_path), query, backend, _config_json(config))


def segment(mesh_path, query, backend, config=None, out=None):
    """One-shot run with default candidate filtering. Writes the usual
    output files when ``out`` is given."""
    session = Session(mesh_path, query, backend, config)
    result = session.fuse()
    if out is not None:
        session.write(str(out), result)
    return result


__all__ = [
    "BACKGROUND",
    "EvalReport",
    "HeatGeodesics",
    "Mesh",
    "Segmentation",
    "Session",
    "View",
    "default_config",
    "dijkstra_geodesic",
    "face_iou",
    "fit_gaussian",
    "gaussian_density",
    "heat_geodesic",
    "miou_report",
    "render_views",
    "segment",
]
