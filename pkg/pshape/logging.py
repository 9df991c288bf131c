import logging
from typing import Optional


class LogConfig:
    log_template = "[%(levelname)s]{0} %(message)s"

    @classmethod
    def init(cls, log_level: int):
        cls.logger = logging.getLogger("pshape")
        if getattr(cls, "handler", None) is not None:
            cls.logger.removeHandler(cls.handler)
        cls.handler = logging.StreamHandler()
        cls.logger.addHandler(cls.handler)
        cls.handler.setFormatter(logging.Formatter(cls.log_template.format("")))
        cls.logger.setLevel(log_level)

    @classmethod
    def get_logger(cls) -> logging.Logger:
        if getattr(cls, "logger", None) is None:
            return logging.getLogger("pshape")
        return cls.logger

    @classmethod
    def switch(cls, context: Optional[str] = None) -> None:
        if getattr(cls, "handler", None) is None:
            return
        if context is None:
            cls.handler.setFormatter(logging.Formatter(cls.log_template.format("")))
        else:
            cls.handler.setFormatter(
                logging.Formatter(cls.log_template.format(f" {context}:"))
            )


class Warnings:
    @staticmethod
    def approximate_solver(points: int, cap: int):
        LogConfig.get_logger().warning(
            f"{points} points exceed the exact solver cap of {cap}; "
            "using the entropic approximation"
        )

    @staticmethod
    def sinkhorn_not_converged(iterations: int, violation: float):
        LogConfig.get_logger().warning(
            f"Entropic solver stopped after {iterations} iterations with marginal "
            f"violation {violation:.3g}; reporting best coupling so far"
        )

    @staticmethod
    def resampled_with_replacement(source: int, target: int):
        LogConfig.get_logger().debug(
            f"Cloud has {source} points but {target} are required; "
            "sampling with replacement"
        )

    @staticmethod
    def early_stop(epoch: int, patience: int):
        LogConfig.get_logger().info(
            f"No validation improvement for {patience} epochs, "
            f"stopping at epoch {epoch}"
        )

    @staticmethod
    def divergence(epoch: int, checkpoint: str):
        LogConfig.get_logger().error(
            f"Loss became non-finite in epoch {epoch}; last good checkpoint kept at "
            f"{checkpoint}"
        )

    @staticmethod
    def degenerate_sample(index: int):
        LogConfig.get_logger().debug(
            f"Generated sample {index} collapsed to a single point; drawing a new "
            "latent vector"
        )
