import numpy as np
import pytest

from confusion.world_model import WorldModelParams


def free_space_model(gain: float = 0.2, eps: float = 1e-3) -> WorldModelParams:
    """Hand-built model with decoded position steps ~ ``gain * action`` and no walls.

    Both hidden layers work in tanh's linear range (inputs scaled by ``eps``)
    and the output layers undo the scaling.  The dynamics variance is tiny.
    """
    d = 2
    a = {}
    a["enc.w1"], a["enc.b1"] = np.zeros((2, 4)), np.zeros(2)
    a["enc.w2"], a["enc.b2"] = np.zeros((2, 2)), np.zeros(2)
    a["enc.w3"], a["enc.b3"] = np.zeros((2 * d, 2)), np.zeros(2 * d)
    a["dyn.w1"] = eps * np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    a["dyn.b1"] = np.zeros(2)
    a["dyn.w2"], a["dyn.b2"] = np.eye(2), np.zeros(2)
    a["dyn.w3"] = np.vstack([gain / eps * np.eye(2), np.zeros((2, 2))])
    a["dyn.b3"] = np.array([0.0, 0.0, -20.0, -20.0])
    a["dec.w1"], a["dec.b1"] = eps * np.eye(2), np.zeros(2)
    a["dec.w2"], a["dec.b2"] = np.eye(2), np.zeros(2)
    a["dec.w3"] = np.vstack([np.eye(2) / eps, np.zeros((2, 2))])
    a["dec.b3"] = np.zeros(4)
    model = WorldModelParams(d, {k: a[k] for k in sorted(a)})
    model.validate()
    return model


@pytest.fixture
def free_space():
    return free_space_model()
