"""Regenerate the bundled pretrained checkpoints: ``python3 -m adderkit.trainer.bundle``."""

from threadpoolctl import threadpool_limits

from . import classify, detect


def main():
    with threadpool_limits(1):
        for path, loss in classify.write_checkpoints() + detect.write_backbone_checkpoints():
            print(f"{path.name}: final loss {loss:.4f}")


if __name__ == "__main__":
    main()
