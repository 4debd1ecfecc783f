import pytest

from utils.logger import setup_logger
from utils.parallel import WorkerPool


@pytest.mark.parametrize("workers", [1, 4])
def test_map_keeps_submission_order(workers):
    pool = WorkerPool(workers)
    assert pool.map(lambda x: x * x, list(range(20)), label="square") == [x * x for x in range(20)]


def test_map_of_nothing_is_empty():
    assert WorkerPool(4).map(lambda x: x, []) == []


def test_failed_job_propagates():
    def explode(x):
        if x == 3:
            raise ValueError("bad chunk")
        return x

    with pytest.raises(ValueError, match="bad chunk"):
        WorkerPool(2).map(explode, list(range(6)))


def test_pool_keeps_no_job_table_between_calls():
    pool = WorkerPool(2)
    for _ in range(3):
        pool.map(str, list(range(50)))
    assert vars(pool) == {"max_workers": 2}


def test_module_loggers_share_suite_handlers():
    child = setup_logger("modules.sde")
    assert child.name == "control_suite.modules.sde"
    assert setup_logger("control_suite.x").name == "control_suite.x"
    assert len(setup_logger().handlers) == 2
    assert not child.handlers
