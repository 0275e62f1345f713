import pytest

from convdissect import cfd, continual, micronet, pda, shapeworld


@pytest.fixture(scope="session")
def trained_setup():
    """A small trained base model plus probe images with masks.

    Shared by dissection and continual tests; kept deliberately small so the
    whole suite stays fast while the model is still non-degenerate.
    """
    samples = shapeworld.gen_dataset(42, 40)
    stream = shapeworld.make_stream(samples, 4, (1, 1))
    base_task = stream.tasks[0]
    model = micronet.init_model(
        micronet.Architecture(), len(base_task.classes), continual.derive_seed(42, "init")
    )
    settings = continual.TrainSettings(epochs=12, lr=0.01, momentum=0.9, batch_size=16)
    model = continual.train_epochs(
        model, base_task.train, settings, continual.derive_seed(42, "base", "train")
    )
    occlusion = pda.with_means(pda.OcclusionConfig(), base_task.train)
    probes = shapeworld.sample_set(base_task, 20)
    return {
        "samples": samples,
        "stream": stream,
        "model": model,
        "settings": settings,
        "occlusion": occlusion,
        "probes": probes,
        "items": cfd.items_from_samples(probes),
        "accuracy": continual.evaluate(model, base_task.test),
    }
