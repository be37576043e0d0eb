"""Object detection trained from generated images plus language prompts.

Subpackages are plain modules; import what you need:

    boxes        geometry (BoxF, iou)
    vocab        class vocabulary
    imagination  prompt building and language-model extension
    synthesis    procedural / remote image synthesis
    dataset      manifest IO, dataset generation, oracle-read counter
    proposals    segmentation-based and grid box proposals
    autodiff     reverse-mode tensors (numpy float64)
    features     conv encoder, RoI pooling, proposal embeddings
    heads        instance-classification branch and refinement stages
    model        full detector, checkpoint IO
    training     ISOD / WSOD / SSOD loops, EMA teacher
    evaluation   NMS, AP, reports, reference baselines
    cli          command-line entry point
"""

__version__ = "0.1.0"
