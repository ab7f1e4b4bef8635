import pytest

from crossview.run_logger import EPOCH_COLUMNS, EpochRecord, RunLogger


def record(stage=1, epoch=0, loss=0.5):
    return EpochRecord(stage=stage, epoch=epoch, steps=4, loss=loss, first_loss=0.69, train_r1=25.0,
                       lr=1e-4, seconds=0.1)


def test_epochs_append_per_stage(tmp_path):
    log = RunLogger(tmp_path)
    log.log_epoch(record(epoch=0))
    log.log_epoch(record(epoch=1, loss=0.4))
    log.log_epoch(record(stage=2))
    frame = log.load_epochs(1)
    assert list(frame.columns) == EPOCH_COLUMNS
    assert frame["loss"].tolist() == [0.5, 0.4]
    assert len(log.load_epochs(2)) == 1
    stats = log.get_statistics()
    assert (stats["total_epochs"], stats["stage1_epochs"], stats["stage2_epochs"]) == (3, 2, 1)


def test_index_survives_reopening(tmp_path):
    RunLogger(tmp_path).log_checkpoint(tmp_path / "stage1.ckpt")
    log = RunLogger(tmp_path)
    log.log_failure("boom")
    stats = log.get_statistics()
    assert stats["checkpoints"] == 1
    assert stats["failures"] == 1
    assert stats["last_failure"] == "boom"


def test_evaluation_summary(tmp_path):
    log = RunLogger(tmp_path)
    log.log_evaluation("test", {"R@1": 50.0})
    assert log.get_statistics()["last_eval_test"] == {"R@1": 50.0}


def test_missing_stage_is_empty(tmp_path):
    assert RunLogger(tmp_path).load_epochs(2).empty


def test_report(tmp_path):
    log = RunLogger(tmp_path)
    log.log_epoch(record())
    report = log.generate_report()
    assert "Stage 1: 1 epochs" in report
    assert "Stage 2" not in report
    assert "first loss 0.6900" in report


@pytest.mark.parametrize("stage", [1, 2])
def test_epoch_file_names(tmp_path, stage):
    assert RunLogger(tmp_path).epoch_file(stage).name == f"stage{stage}_log.csv"
