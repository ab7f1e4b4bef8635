"""
Run Logger
==========

Append-only record of a training run: one CSV row per epoch and a small
run_index.json with counters, so a run directory explains itself.
"""

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Union

import pandas as pd

EPOCH_COLUMNS = ["timestamp", "stage", "epoch", "steps", "loss", "first_loss", "train_r1", "lr", "seconds"]


@dataclass
class EpochRecord:
    """One finished epoch"""
    stage: int
    epoch: int
    steps: int
    loss: float  # mean over the epoch's steps
    first_loss: float  # loss of the epoch's first step
    train_r1: float
    lr: float  # learning rate after the epoch's last step
    seconds: float
    timestamp: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    def to_dict(self) -> Dict:
        return asdict(self)


class RunLogger:
    """Writes stage<k>_log.csv rows and keeps run_index.json counters"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.index_file = self.out_dir / "run_index.json"
        if not self.index_file.exists():
            self._create_index()

    def _create_index(self):
        index = {
            "created": datetime.now().isoformat(timespec="seconds"),
            "total_epochs": 0,
            "stage1_epochs": 0,
            "stage2_epochs": 0,
            "checkpoints": 0,
            "evaluations": 0,
            "failures": 0,
        }
        self._save_json(self.index_file, index)

    def epoch_file(self, stage: int) -> Path:
        return self.out_dir / f"stage{stage}_log.csv"

    def log_epoch(self, record: EpochRecord) -> Path:
        path = self.epoch_file(record.stage)
        row = pd.DataFrame([record.to_dict()], columns=EPOCH_COLUMNS)
        row.to_csv(path, mode="a", header=not path.exists(), index=False)

        index = self.get_statistics()
        index["total_epochs"] += 1
        key = f"stage{record.stage}_epochs"
        index[key] = index.get(key, 0) + 1
        self._save_json(self.index_file, index)
        return path

    def log_checkpoint(self, path: Union[str, Path]):
        self._bump("checkpoints", last_checkpoint=str(path))

    def log_evaluation(self, split: str, metrics: Dict[str, float]):
        self._bump("evaluations", **{f"last_eval_{split}": metrics})

    def log_failure(self, message: str):
        self._bump("failures", last_failure=message)

    def _bump(self, counter: str, **extra):
        index = self.get_statistics()
        index[counter] = index.get(counter, 0) + 1
        index.update(extra)
        self._save_json(self.index_file, index)

    def get_statistics(self) -> Dict:
        with open(self.index_file, "r") as f:
            return json.load(f)

    def load_epochs(self, stage: int) -> pd.DataFrame:
        path = self.epoch_file(stage)
        if not path.exists():
            return pd.DataFrame(columns=EPOCH_COLUMNS)
        return pd.read_csv(path)

    def _save_json(self, filepath: Path, data):
        with open(filepath, "w") as f:
            json.dump(data, f, indent=2)

    def generate_report(self, stage: Optional[int] = None) -> str:
        """Human-readable summary of the logged epochs"""
        stages = [stage] if stage is not None else [1, 2]
        stats = self.get_statistics()
        report = f"""
╔══════════════════════════════════════════════════════════
║ 🛰️  RUN REPORT - {self.out_dir}
╚══════════════════════════════════════════════════════════

📊 SUMMARY:
   Epochs: {stats['total_epochs']}
   Checkpoints: {stats['checkpoints']}
   Evaluations: {stats['evaluations']}
   Failures: {stats['failures']}
"""
        for s in stages:
            frame = self.load_epochs(s)
            if frame.empty:
                continue
            last = frame.iloc[-1]
            report += (
                f"\n   Stage {s}: {len(frame)} epochs, first loss {frame['first_loss'].iloc[0]:.4f}"
                f" -> last {last['loss']:.4f}, train R@1 {last['train_r1']:.1f}%\n"
            )
        return report
