from logging_config import logger
from worker_pool import update_worker_limit


def _checked(config_module, name, cast, minimum, strict=False):
    """Return a valid setting, resetting it to its default (with a warning) otherwise."""
    default = config_module.DEFAULTS[name]
    raw = getattr(config_module, name, default)
    try:
        value = cast(raw)
    except (ValueError, TypeError):
        logger.warning(f"Invalid {name} in config ('{raw}'), using default {default}.")
        value = default
    else:
        too_small = value <= minimum if strict else value < minimum
        if too_small:
            bound = f"greater than {minimum}" if strict else f"at least {minimum}"
            logger.warning(f"{name} in config ('{raw}') must be {bound}. Using default {default}.")
            value = default
    setattr(config_module, name, value)
    return value


def validate_config(config_module):
    """
    Validate the run settings loaded by config.py.

    Invalid values are logged and replaced by their defaults; nothing here is
    fatal. The worker cap is pushed into worker_pool.

    Args:
        config_module: The imported config module

    Returns:
        bool: True once every setting holds a usable value
    """
    threads = _checked(config_module, 'threads', int, 1)
    iterations = _checked(config_module, 'iterations', int, 1)
    burn_in = _checked(config_module, 'burn_in', int, 0)
    _checked(config_module, 'thin', int, 1)
    _checked(config_module, 'chains', int, 1)
    _checked(config_module, 'seed', int, 0)
    _checked(config_module, 'bd_time', float, 0.0, strict=True)
    _checked(config_module, 'min_bloc_size', int, 0)
    _checked(config_module, 'draws', int, 1)
    _checked(config_module, 'pseudocount', float, 0.0, strict=True)

    if burn_in >= iterations:
        defaults = config_module.DEFAULTS
        logger.warning(
            f"burn_in ({burn_in}) must be below iterations ({iterations}). "
            f"Using defaults {defaults['iterations']} and {defaults['burn_in']}."
        )
        config_module.iterations = defaults['iterations']
        config_module.burn_in = defaults['burn_in']

    update_worker_limit(threads)

    log_dir = getattr(config_module, 'log_dir', 'logs')
    if log_dir:
        logger.info(f"Log files written under {log_dir}")
    else:
        logger.info("Log file disabled; logging to the console only")
    return True
