"""
On-disk formats.

Checkpoint (`*.ckpt`):
    8 bytes   magic b"GILABCK1"
    8 bytes   header length n, unsigned little-endian
    n bytes   UTF-8 JSON header {format, spec, seed, precision, entries}
    ...       raw little-endian arrays, concatenated in header order; each entry
              records name, numpy dtype string, shape, byte offset and length

Results: `results.json` plus raw little-endian arrays (`*.bin`) for originals and
reconstructions, referenced by relative path with shape and dtype. Each victim's
outcome is also written to its own JSON file as soon as it is known.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch

from attacks import AttackResult, AttackSpec, TrajectoryRecord
from errors import CorruptDataset, InvalidInput
from fedsim import RoundLog
from metrics import ImageMetrics, MetricReport
from models import ModelSpec, ModelState, build_model

logger = logging.getLogger("persistence")
logger.setLevel(logging.DEBUG)

CHECKPOINT_MAGIC = b"GILABCK1"
CHECKPOINT_FORMAT = 1
PathLike = Union[str, Path]


def _little_endian_bytes(tensor: torch.Tensor):
    array = np.ascontiguousarray(tensor.detach().cpu().numpy())
    array = array.astype(array.dtype.newbyteorder("<"), copy=False)
    return array.dtype.str, list(array.shape), array.tobytes(order="C")


def _from_bytes(blob: bytes, dtype: str, shape: List[int]) -> torch.Tensor:
    array = np.frombuffer(blob, dtype=np.dtype(dtype)).reshape(shape)
    return torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))


def save_checkpoint(state: ModelState, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, tensor in state.net.state_dict().items():
        dtype, shape, blob = _little_endian_bytes(tensor)
        entries.append({"name": name, "dtype": dtype, "shape": shape, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "format": CHECKPOINT_FORMAT,
            "spec": state.spec.model_dump(mode="json"),
            "seed": state.seed,
            "precision": 64 if state.dtype == torch.float64 else 32,
            "entries": entries,
        }
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(len(header).to_bytes(8, "little"))
        handle.write(header)
        for blob in blobs:
            handle.write(blob)
    logger.info(f"💾 Checkpoint written to {path} ({offset} array bytes)")
    return path


def load_checkpoint(path: PathLike) -> ModelState:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CorruptDataset(f"{path} is not a checkpoint (bad magic)")
    length = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16:16 + length].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CorruptDataset(f"{path}: unsupported checkpoint format {header.get('format')}")
    body = data[16 + length:]
    state = build_model(ModelSpec.model_validate(header["spec"]), seed=header["seed"], precision=header["precision"])
    arrays = {}
    for entry in header["entries"]:
        blob = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CorruptDataset(f"{path}: array {entry['name']} is truncated")
        arrays[entry["name"]] = _from_bytes(blob, entry["dtype"], entry["shape"])
    state.net.load_state_dict(arrays, strict=True)
    state.net.eval()
    logger.info(f"✅ Loaded checkpoint {path}: {state.spec.label()}")
    return state


def save_array(tensor: torch.Tensor, root: Path, relative: str) -> Dict[str, Any]:
    """Write a raw little-endian array under root; returns its JSON descriptor"""
    target = root / relative
    target.parent.mkdir(parents=True, exist_ok=True)
    dtype, shape, blob = _little_endian_bytes(tensor)
    target.write_bytes(blob)
    return {"path": relative, "dtype": dtype, "shape": shape}


def load_array(descriptor: Dict[str, Any], root: Path) -> torch.Tensor:
    blob = (root / descriptor["path"]).read_bytes()
    return _from_bytes(blob, descriptor["dtype"], descriptor["shape"])


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=False))
    return path


def read_json(path: Path) -> Any:
    return json.loads(path.read_text())


@dataclass
class AttackRun:
    """Outcome of one attack configuration over the whole victim set"""

    attack: AttackSpec
    results: List[AttackResult]
    report: MetricReport


@dataclass
class ResultsBundle:
    config: Dict[str, Any]
    model_label: str
    defense_label: str
    parameter_count: int
    victim_indices: List[int]
    victim_labels: List[int]
    originals: torch.Tensor
    runs: List[AttackRun] = field(default_factory=list)
    rounds: List[RoundLog] = field(default_factory=list)
    accuracy: Optional[float] = None
    environment: Dict[str, Any] = field(default_factory=dict)


def _result_payload(result: AttackResult, root: Path, relative: str) -> Dict[str, Any]:
    payload = result.summary()
    payload["reconstruction"] = save_array(result.reconstruction, root, relative)
    return payload


def _result_from_payload(payload: Dict[str, Any], root: Path) -> AttackResult:
    return AttackResult(
        reconstruction=load_array(payload["reconstruction"], root),
        label=payload["label"],
        final_loss=payload["final_loss"],
        best_loss=payload["best_loss"],
        iterations=payload["iterations"],
        stop_reason=payload["stop_reason"],
        metrics=None if payload["metrics"] is None else ImageMetrics.model_validate(payload["metrics"]),
        trajectory=None if payload["trajectory"] is None else TrajectoryRecord.model_validate(payload["trajectory"]),
        error=payload.get("error"),
        best_history=payload.get("best_history", []),
    )


def victim_file(root: Path, run_index: int, victim: int) -> Path:
    return root / "victims" / f"run{run_index:02d}" / f"victim_{victim:04d}.json"


def save_victim_result(root: Path, run_index: int, victim: int, result: AttackResult) -> Path:
    relative = f"arrays/run{run_index:02d}/reconstruction_{victim:04d}.bin"
    return write_json(victim_file(root, run_index, victim), _result_payload(result, root, relative))


def load_victim_result(root: Path, run_index: int, victim: int) -> AttackResult:
    return _result_from_payload(read_json(victim_file(root, run_index, victim)), root)


def save_bundle(bundle: ResultsBundle, root: PathLike) -> Path:
    """Write results.json; per-victim files must already exist for every run"""
    root = Path(root)
    payload = {
        "config": bundle.config,
        "model": bundle.model_label,
        "defense": bundle.defense_label,
        "parameter_count": bundle.parameter_count,
        "accuracy": bundle.accuracy,
        "environment": bundle.environment,
        "victims": {
            "indices": bundle.victim_indices,
            "labels": bundle.victim_labels,
            "originals": save_array(bundle.originals, root, "arrays/originals.bin"),
        },
        "rounds": [log.model_dump() for log in bundle.rounds],
        "runs": [
            {
                "attack": run.attack.model_dump(mode="json"),
                "report": run.report.model_dump(),
                "victims": [
                    str(victim_file(root, index, victim).relative_to(root)) for victim in range(len(run.results))
                ],
            }
            for index, run in enumerate(bundle.runs)
        ],
    }
    path = write_json(root / "results.json", payload)
    logger.info(f"💾 Results written to {path}")
    return path


def load_bundle(root: PathLike) -> ResultsBundle:
    root = Path(root)
    path = root / "results.json"
    if not path.exists():
        raise InvalidInput(f"No results.json under {root}")
    payload = read_json(path)
    runs = []
    for run in payload["runs"]:
        results = [_result_from_payload(read_json(root / relative), root) for relative in run["victims"]]
        runs.append(
            AttackRun(
                attack=AttackSpec.model_validate(run["attack"]),
                results=results,
                report=MetricReport.model_validate(run["report"]),
            )
        )
    return ResultsBundle(
        config=payload["config"],
        model_label=payload["model"],
        defense_label=payload["defense"],
        parameter_count=payload["parameter_count"],
        victim_indices=payload["victims"]["indices"],
        victim_labels=payload["victims"]["labels"],
        originals=load_array(payload["victims"]["originals"], root),
        runs=runs,
        rounds=[RoundLog.model_validate(log) for log in payload["rounds"]],
        accuracy=payload["accuracy"],
        environment=payload["environment"],
    )
