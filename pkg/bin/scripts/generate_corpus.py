import argparse

import partialupdates.datasets.synthetic_corpus as corpus

if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Write a synthetic token corpus to a flat binary file.")
    parser.add_argument("output", help="Path of the corpus file.")
    parser.add_argument("--generator", default="order-2-markov", choices=corpus.GENERATORS)
    parser.add_argument("--vocab-size", type=int, default=64)
    parser.add_argument("--seq-len", type=int, default=33)
    parser.add_argument("--num-sequences", type=int, default=2048)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    spec = corpus.SyntheticCorpusSpec(
        vocab_size=args.vocab_size,
        seq_len=args.seq_len,
        generator=args.generator,
        seed=args.seed,
        num_sequences=args.num_sequences,
        eval_sequences=0,
    )
    store = corpus.generate_corpus(spec)
    corpus.save_corpus(args.output, store.train, spec.vocab_size)
    print("Wrote %d sequences of %d tokens to %s" % (store.train.shape[0], spec.seq_len, args.output))
