import pytest

from cgdd.data import export_sklearn_digits, load_eval_dataset
from cgdd.models import save_checkpoint
from cgdd.trainer import TeacherSchedule, train_teacher


@pytest.fixture(scope="session")
def digits_root(tmp_path_factory):
    """A dataset root whose ``mnist/`` holds scikit-learn digits in MNIST layout."""
    root = tmp_path_factory.mktemp("data")
    export_sklearn_digits(root / "mnist")
    return root


@pytest.fixture(scope="session")
def digits_teacher(digits_root, tmp_path_factory):
    """(checkpoint path, model, test accuracy) for a LeNet-5 trained on digits."""
    train = load_eval_dataset("mnist", digits_root / "mnist", split="train")
    test = load_eval_dataset("mnist", digits_root / "mnist", split="test")
    model, acc = train_teacher("lenet5", train, TeacherSchedule(epochs=15, batch_size=64), test)
    path = tmp_path_factory.mktemp("teacher") / "teacher.safetensors"
    save_checkpoint(model, path, {"test_accuracy": acc})
    return path, model, acc


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
