#include <stdio.h>
#include "cnnjm.h"

int main(int argc, char **argv) {
    CnnjmModel *model = NULL;
    CnnjmModelInfo info;
    double score = 0.0;

    if (argc < 2) {
        fprintf(stderr, "usage: %s MODEL\n", argv[0]);
        return 2;
    }
    if (cnnjm_model_load(argv[1], &model) != CNNJM_STATUS_OK) {
        fprintf(stderr, "load failed: %s\n", cnnjm_last_error());
        return 1;
    }
    cnnjm_model_info(model, &info);
    if (cnnjm_model_score(model, "le chat", "the cat", "0-0 1-1", NULL, &score) != CNNJM_STATUS_OK) {
        fprintf(stderr, "score failed: %s\n", cnnjm_last_error());
        cnnjm_model_free(model);
        return 1;
    }
    printf("arch=%d vocab=%zu score=%.17g\n", (int)info.arch, info.target_vocab_size, score);
    cnnjm_model_free(model);
    return 0;
}
