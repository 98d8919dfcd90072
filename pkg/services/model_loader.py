"""Model files (TOML or JSON) and the built-in two-stream example family."""
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Tuple

import numpy as np

from services.model_service import ArrivalModel, ClassStream, PhBatch
from services.service_laws import Deterministic, PointMixture, ServiceLaw
from utils.errors import InvalidServiceLaw, ModelFileError, ModelValidationError, UsageError

logger = logging.getLogger(__name__)

SWITCH_RATE = 0.1


def _parse_batch(entry: dict, where: str) -> PhBatch:
    if entry is None:
        return PhBatch([1.0], [[0.0]])
    if "geometric_mean" in entry:
        return PhBatch.geometric(float(entry["geometric_mean"]))
    if "pmf" in entry:
        return PhBatch.from_pmf(entry["pmf"])
    if "alpha" in entry and "P" in entry:
        return PhBatch(entry["alpha"], entry["P"])
    raise ModelValidationError(f"{where}: batch needs {{alpha, P}}, {{geometric_mean}} or {{pmf}}")


def model_from_dict(data: dict, source: str = "<dict>") -> Tuple[ArrivalModel, List[ServiceLaw], dict]:
    try:
        C = np.asarray(data["C"], dtype=float)
        entries = data["classes"]
    except KeyError as e:
        raise ModelFileError(source, f"missing key {str(e)}") from e
    except (TypeError, ValueError) as e:
        raise ModelFileError(source, f"C is not a numeric matrix: {str(e)}") from e
    if "env_dim" in data and int(data["env_dim"]) != C.shape[0]:
        raise ModelFileError(source, f"env_dim = {data['env_dim']} but C has {C.shape[0]} rows")
    if not entries:
        raise ModelFileError(source, "no arrival classes")

    streams, services = [], []
    for k, entry in enumerate(entries):
        where = f"{source}: class {k + 1}"
        try:
            D = np.asarray(entry["D"], dtype=float)
            service = ServiceLaw.from_dict(entry["service"])
        except KeyError as e:
            raise ModelFileError(source, f"class {k + 1} is missing {str(e)}") from e
        except InvalidServiceLaw as e:
            raise InvalidServiceLaw(f"{where}: {str(e)}") from e
        streams.append(ClassStream(D, _parse_batch(entry.get("batch"), where)))
        services.append(service)

    metadata = {"name": data.get("name", Path(source).stem), "reference": dict(data.get("reference", {}))}
    model = ArrivalModel(C, streams, name=metadata["name"], reference=metadata["reference"])
    return model, services, metadata


def load_model(path) -> Tuple[ArrivalModel, List[ServiceLaw], dict]:
    """
    Read a model file.

    Args:
        path: .toml or .json file with env_dim, C and a list of classes
            (D, batch, service)

    Returns:
        (ArrivalModel, service laws, metadata)
    """
    path = Path(path)
    if not path.is_file():
        raise ModelFileError(str(path), "no such file")
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text())
        else:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
    except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ModelFileError(str(path), f"cannot parse: {str(e)}") from e
    logger.info(f"loaded model {path}")
    return model_from_dict(data, str(path))


def model_to_dict(model: ArrivalModel, services: List[ServiceLaw]) -> dict:
    out = {
        "name": model.name,
        "env_dim": model.env_dim,
        "C": model.C.tolist(),
        "classes": [
            {"D": stream.D.tolist(), "batch": stream.batch.to_dict(), "service": service.to_dict()}
            for stream, service in zip(model.classes, services)
        ],
    }
    if model.reference:
        out["reference"] = dict(model.reference)
    return out


def dump_model(model: ArrivalModel, services: List[ServiceLaw], path) -> Path:
    """Write the model in the JSON form of the model-file schema."""
    path = Path(path)
    if path.suffix.lower() != ".json":
        raise UsageError(f"{path}: models are written as .json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model, services), indent=2, sort_keys=True) + "\n")
    return path


def _interrupted(rate: float, g: float) -> Tuple[np.ndarray, np.ndarray]:
    """Two-state on/off environment emitting batches at rate 2 rate / g while on."""
    on = 2.0 * rate / g
    C = np.array([[-on - SWITCH_RATE, SWITCH_RATE], [SWITCH_RATE, -SWITCH_RATE]])
    D = np.array([[on, 0.0], [0.0, 0.0]])
    return C, D


def example_case(arrival: str, service: str, g: float = 1.0, lam1: float = 0.15,
                 lam2: float = 0.15) -> Tuple[ArrivalModel, List[ServiceLaw]]:
    """
    Two-class example family with geometric batches of mean g.

    arrival 'P': one shared on/off environment feeds both classes.
    arrival 'I': two independent on/off environments (Kronecker sum).
    arrival 'N': class 1 arrives only in state 1, class 2 only in state 2.
    service 'GD': deterministic 1 for class 1 and 4 for class 2.
    service 'GI': both classes draw 1 or 4 with probabilities lam1/lam, lam2/lam.
    """
    arrival, service = arrival.upper(), service.upper()
    if arrival == "P":
        on1, on2 = 2.0 * lam1 / g, 2.0 * lam2 / g
        C = np.array([[-on1 - on2 - SWITCH_RATE, SWITCH_RATE], [SWITCH_RATE, -SWITCH_RATE]])
        D1 = np.array([[on1, 0.0], [0.0, 0.0]])
        D2 = np.array([[on2, 0.0], [0.0, 0.0]])
    elif arrival == "I":
        C1, d1 = _interrupted(lam1, g)
        C2, d2 = _interrupted(lam2, g)
        eye = np.eye(2)
        C = np.kron(C1, eye) + np.kron(eye, C2)
        D1, D2 = np.kron(d1, eye), np.kron(eye, d2)
    elif arrival == "N":
        on1, on2 = 2.0 * lam1 / g, 2.0 * lam2 / g
        C = np.array([[-on1 - SWITCH_RATE, SWITCH_RATE], [SWITCH_RATE, -on2 - SWITCH_RATE]])
        D1 = np.diag([on1, 0.0])
        D2 = np.diag([0.0, on2])
    else:
        raise UsageError(f"arrival case must be P, I or N, got {arrival!r}")

    if service == "GD":
        services = [Deterministic(1.0), Deterministic(4.0)]
    elif service == "GI":
        w1 = lam1 / (lam1 + lam2)
        services = [PointMixture([1.0, 4.0], [w1, 1.0 - w1]) for _ in range(2)]
    else:
        raise UsageError(f"service case must be GD or GI, got {service!r}")

    batch = PhBatch.geometric(g)
    name = f"{arrival.lower()}_{service.lower()}_g{g:g}"
    model = ArrivalModel(C, [ClassStream(D1, batch), ClassStream(D2, batch)], name=name)
    return model, services
