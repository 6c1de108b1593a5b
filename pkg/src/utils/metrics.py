import numpy as np


def ACCURACY(predictions, targets):
    """
    :param predictions: (-1, n_classes) logits or scores
    :param targets: (-1,) true class ids
    :return: fraction of rows whose arg-max is the target
    """
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if len(targets) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(predictions, axis=1) == targets))


def BINOMIAL_CI(accuracy, n, z=3.0):
    """Normal-approximation half width of a binomial proportion interval."""
    return z * np.sqrt(max(accuracy * (1.0 - accuracy), 1e-12) / n)
