from mismatched_regression.harness import main

if __name__ == "__main__":
    main()
